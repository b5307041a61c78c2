//! Deterministic simulated microservice chain.
//!
//! A scenario is a sequence of stages, each with a base latency. Every
//! parameter value carries a multiplier (1 unless stated), and a stage's
//! latency under a configuration is its base times the product of the
//! configuration's multipliers. A request is a chain trace: one root span
//! named `chain` and one sequential child span per stage.
//!
//! Noise is multiplicative: each stage duration is scaled by `1 + ε` with
//! `ε = η·(2u − 1)`, where `u` is the first `f64` drawn from a ChaCha8
//! generator whose 32-byte seed is the little-endian concatenation of
//! `(seed, config_index, request_index, stage_index)` as `u64`s. Results
//! are reproducible within this implementation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::MeasurementProtocol;
use crate::space::{Configuration, SearchSpace, SpaceError};
use crate::trace::{aggregate_samples, LatencySample, Span, Trace};
use crate::trial::{Evaluation, TrialStatus};

/// Service name of the root span of every simulated request.
pub const ROOT_SERVICE: &str = "chain";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("malformed scenario document: {0}")]
    Document(String),
    #[error("scenario must declare at least one stage")]
    NoStages,
    #[error("stage `{0}`: base latency must be positive")]
    BadStage(String),
    #[error("effects name unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{parameter}`: multiplier for {value} must be positive")]
    BadMultiplier { parameter: String, value: String },
    #[error("noise amplitude must lie in [0, 1), got {0}")]
    BadNoise(f64),
    #[error("failure rule {0} has no conditions")]
    EmptyFailureRule(usize),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("simulated failure: {reason}")]
    Failed { reason: String },
    #[error(transparent)]
    Config(#[from] SpaceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRuleDoc {
    pub when: BTreeMap<String, serde_json::Value>,
    pub reason: String,
}

/// Wire form of a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    pub stages: Vec<(String, f64)>,
    #[serde(default)]
    pub effects: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub noise_amplitude: f64,
    #[serde(default)]
    pub failures: Vec<FailureRuleDoc>,
}

impl ScenarioDoc {
    pub fn parse(document: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(document).map_err(|e| ScenarioError::Document(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Document(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct FailureRule {
    /// (parameter position, value position) terms, all of which must hold.
    terms: Vec<(usize, usize)>,
    reason: String,
}

/// A scenario bound to the search space it is evaluated over.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    doc: ScenarioDoc,
    space: SearchSpace,
    /// `multipliers[p][v]` for parameter position `p`, value position `v`.
    multipliers: Vec<Vec<f64>>,
    failures: Vec<FailureRule>,
}

impl Scenario {
    pub fn bind(doc: ScenarioDoc, space: &SearchSpace) -> Result<Self, ScenarioError> {
        if doc.stages.is_empty() {
            return Err(ScenarioError::NoStages);
        }
        if let Some((name, _)) = doc.stages.iter().find(|(_, b)| !(*b > 0.0 && b.is_finite())) {
            return Err(ScenarioError::BadStage(name.clone()));
        }
        if !(0.0..1.0).contains(&doc.noise_amplitude) {
            return Err(ScenarioError::BadNoise(doc.noise_amplitude));
        }

        let mut multipliers: Vec<Vec<f64>> = space
            .parameters()
            .iter()
            .map(|p| vec![1.0; p.values().len()])
            .collect();
        for (name, table) in &doc.effects {
            let pos = space
                .position(name)
                .ok_or_else(|| ScenarioError::UnknownParameter(name.clone()))?;
            let param = &space.parameters()[pos];
            for (key, &m) in table {
                let value = param.parse_admissible(&serde_json::Value::String(key.clone()))?;
                if !(m > 0.0 && m.is_finite()) {
                    return Err(ScenarioError::BadMultiplier {
                        parameter: name.clone(),
                        value: value.to_string(),
                    });
                }
                let v = param.position_of(&value).expect("admissible");
                multipliers[pos][v] = m;
            }
        }

        let mut failures = Vec::with_capacity(doc.failures.len());
        for (i, rule) in doc.failures.iter().enumerate() {
            if rule.when.is_empty() {
                return Err(ScenarioError::EmptyFailureRule(i));
            }
            let mut terms = Vec::with_capacity(rule.when.len());
            for (name, raw) in &rule.when {
                let pos = space
                    .position(name)
                    .ok_or_else(|| ScenarioError::UnknownParameter(name.clone()))?;
                let param = &space.parameters()[pos];
                let value = param.parse_admissible(raw)?;
                terms.push((pos, param.position_of(&value).expect("admissible")));
            }
            failures.push(FailureRule {
                terms,
                reason: rule.reason.clone(),
            });
        }

        Ok(Scenario {
            doc,
            space: space.clone(),
            multipliers,
            failures,
        })
    }

    pub fn doc(&self) -> &ScenarioDoc {
        &self.doc
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn noise_amplitude(&self) -> f64 {
        self.doc.noise_amplitude
    }

    fn failure_at(&self, positions: &[usize]) -> Option<&str> {
        self.failures
            .iter()
            .find(|rule| rule.terms.iter().all(|&(p, v)| positions[p] == v))
            .map(|rule| rule.reason.as_str())
    }

    fn factor_at(&self, positions: &[usize]) -> f64 {
        self.multipliers
            .iter()
            .zip(positions)
            .map(|(table, &v)| table[v])
            .product()
    }

    /// Noise-free latency of each stage, in stage order.
    pub fn stage_latencies(&self, config: &Configuration) -> Result<Vec<f64>, SimError> {
        let positions = self.space.config_positions(config)?;
        if let Some(reason) = self.failure_at(&positions) {
            return Err(SimError::Failed {
                reason: reason.to_string(),
            });
        }
        let factor = self.factor_at(&positions);
        Ok(self.doc.stages.iter().map(|(_, base)| base * factor).collect())
    }

    /// Noise-free end-to-end latency: the sum of the stage latencies.
    pub fn closed_form_latency(&self, config: &Configuration) -> Result<f64, SimError> {
        Ok(self.stage_latencies(config)?.into_iter().sum())
    }

    pub fn simulate_request(
        &self,
        config: &Configuration,
        request_index: u64,
        seed: u64,
    ) -> Result<Trace, SimError> {
        let config_index = self.space.config_to_index(config)?;
        let stages = self.stage_latencies(config)?;
        let eta = self.doc.noise_amplitude;

        let mut spans = Vec::with_capacity(stages.len() + 1);
        let mut cursor = 0.0;
        for (stage_index, ((service, _), latency)) in self.doc.stages.iter().zip(stages).enumerate() {
            let duration = if eta == 0.0 {
                latency
            } else {
                let u = noise_uniform(seed, config_index, request_index, stage_index as u64);
                latency * (1.0 + eta * (2.0 * u - 1.0))
            };
            spans.push(Span {
                span_id: format!("s{stage_index}"),
                parent_id: Some(ROOT_SERVICE.to_string()),
                service: service.clone(),
                start_s: cursor,
                duration_s: duration,
            });
            cursor += duration;
        }
        spans.insert(
            0,
            Span {
                span_id: ROOT_SERVICE.to_string(),
                parent_id: None,
                service: ROOT_SERVICE.to_string(),
                start_s: 0.0,
                duration_s: cursor,
            },
        );
        Ok(Trace {
            trace_id: format!("{seed}-{config_index}-{request_index}"),
            spans,
        })
    }

    /// Runs the measurement protocol against the simulated chain.
    ///
    /// A failed request ends the trial as Incomplete with the matching
    /// rule's reason; samples gathered before the failure are kept.
    pub fn evaluate(
        &self,
        config: &Configuration,
        protocol: &MeasurementProtocol,
        seed: u64,
    ) -> Result<Evaluation, SpaceError> {
        let mut samples = Vec::with_capacity(protocol.requests as usize);
        let mut failure = None;
        for request_index in 0..protocol.requests as u64 {
            match self.simulate_request(config, request_index, seed) {
                Ok(trace) => samples.push(
                    LatencySample::from_trace(request_index, &trace)
                        .expect("simulated traces have a single root"),
                ),
                Err(SimError::Failed { reason }) => {
                    failure = Some(reason);
                    break;
                }
                Err(SimError::Config(e)) => return Err(e),
            }
        }
        let stats = aggregate_samples(&samples, protocol).ok();
        let elapsed_s = samples.iter().map(|s| s.end_to_end).sum();
        let status = match failure {
            Some(reason) => TrialStatus::incomplete(reason),
            None => TrialStatus::Complete,
        };
        Ok(Evaluation {
            status,
            stats,
            samples: samples.iter().map(|s| s.end_to_end).collect(),
            elapsed_s,
        })
    }
}

fn noise_uniform(seed: u64, config_index: u64, request_index: u64, stage_index: u64) -> f64 {
    let mut key = [0u8; 32];
    for (chunk, word) in key
        .chunks_exact_mut(8)
        .zip([seed, config_index, request_index, stage_index])
    {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key).gen::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{parse_space, Value};
    use crate::trace::{end_to_end_latency, per_service_latency};
    use serde_json::json;

    fn s2() -> SearchSpace {
        parse_space(
            &json!({"name": "s2", "parameters": [
                {"name": "gc", "kind": "categorical", "values": ["serial", "g1", "zgc"], "default": "g1"},
                {"name": "heap", "kind": "byte", "values": ["256m", "512m"], "default": "256m"}
            ]})
            .to_string(),
        )
        .unwrap()
    }

    fn sim1_doc() -> ScenarioDoc {
        ScenarioDoc::parse(
            &json!({
                "stages": [["ingest", 0.3], ["toll", 0.5]],
                "effects": {
                    "gc": {"serial": 1.05, "g1": 1.00, "zgc": 0.90},
                    "heap": {"268435456": 1.00, "512m": 0.95}
                },
                "noise_amplitude": 0.0
            })
            .to_string(),
        )
        .unwrap()
    }

    fn config(gc: &str, heap: i64) -> Configuration {
        [("gc", Value::from(gc)), ("heap", Value::Int(heap))].into_iter().collect()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1.0)
    }

    const M256: i64 = 268_435_456;
    const M512: i64 = 536_870_912;

    #[test]
    fn closed_form_examples() {
        let sim = Scenario::bind(sim1_doc(), &s2()).unwrap();
        assert!(close(sim.closed_form_latency(&config("g1", M256)).unwrap(), 0.8));
        assert!(close(sim.closed_form_latency(&config("zgc", M512)).unwrap(), 0.684));
        assert!(close(sim.closed_form_latency(&config("serial", M256)).unwrap(), 0.84));
    }

    #[test]
    fn noise_free_request_matches_closed_form() {
        let sim = Scenario::bind(sim1_doc(), &s2()).unwrap();
        let best = config("zgc", M512);
        let trace = sim.simulate_request(&best, 7, 3).unwrap();
        trace.validate().unwrap();
        assert!(close(end_to_end_latency(&trace).unwrap(), 0.684));
        let per = per_service_latency(&trace).unwrap();
        assert!(close(per["ingest"], 0.2565));
        assert!(close(per["toll"], 0.4275));
        assert!(close(trace.spans[2].start_s, 0.2565));
        for (i, seed) in [(0, 0), (1, 99), (40, 12345)] {
            assert_eq!(sim.simulate_request(&best, i, seed).unwrap().spans, trace.spans);
        }
    }

    #[test]
    fn failure_rules_fire() {
        let mut doc = sim1_doc();
        doc.failures.push(FailureRuleDoc {
            when: [("gc".to_string(), json!("zgc")), ("heap".to_string(), json!("256m"))]
                .into_iter()
                .collect(),
            reason: "oom".into(),
        });
        let sim = Scenario::bind(doc, &s2()).unwrap();
        assert_eq!(
            sim.simulate_request(&config("zgc", M256), 0, 0).unwrap_err(),
            SimError::Failed { reason: "oom".into() }
        );
        assert!(sim.simulate_request(&config("zgc", M512), 0, 0).is_ok());

        let eval = sim
            .evaluate(&config("zgc", M256), &MeasurementProtocol::default(), 0)
            .unwrap();
        assert_eq!(eval.status.reason(), Some("oom"));
        assert!(eval.stats.is_none());
    }

    #[test]
    fn evaluation_is_exact_without_noise() {
        let sim = Scenario::bind(sim1_doc(), &s2()).unwrap();
        let eval = sim
            .evaluate(&config("zgc", M512), &MeasurementProtocol::default(), 1)
            .unwrap();
        assert!(eval.status.is_complete());
        let stats = eval.stats.unwrap();
        assert_eq!(stats.count, 45);
        assert!(close(stats.mean, 0.684));
        assert_eq!(eval.samples.len(), 50);
    }

    #[test]
    fn noisy_evaluation_is_deterministic_and_bounded() {
        let mut doc = sim1_doc();
        doc.noise_amplitude = 0.05;
        let sim = Scenario::bind(doc, &s2()).unwrap();
        let c = config("serial", M512);
        let protocol = MeasurementProtocol::new(1005, 5, 60.0).unwrap();
        let a = sim.evaluate(&c, &protocol, 42).unwrap();
        let b = sim.evaluate(&c, &protocol, 42).unwrap();
        assert_eq!(a, b);
        let other_seed = sim.evaluate(&c, &protocol, 43).unwrap();
        assert_ne!(a.samples, other_seed.samples);

        let exact = sim.closed_form_latency(&c).unwrap();
        for &s in &a.samples {
            assert!(s >= exact * 0.95 - 1e-12 && s <= exact * 1.05 + 1e-12);
        }
        let mean = a.stats.unwrap().mean;
        assert!((mean - exact).abs() / exact < 0.05 / 10.0);
    }

    #[test]
    fn raising_a_multiplier_raises_latency() {
        let base = Scenario::bind(sim1_doc(), &s2()).unwrap();
        let c = config("g1", M512);
        let before = base.closed_form_latency(&c).unwrap();
        let mut doc = sim1_doc();
        doc.effects.get_mut("gc").unwrap().insert("g1".into(), 1.01);
        let after = Scenario::bind(doc, &s2()).unwrap().closed_form_latency(&c).unwrap();
        assert!(after > before);
    }

    #[test]
    fn binding_errors() {
        let space = s2();
        let mut doc = sim1_doc();
        doc.effects.insert("threads".into(), BTreeMap::new());
        assert_eq!(
            Scenario::bind(doc, &space).unwrap_err(),
            ScenarioError::UnknownParameter("threads".into())
        );

        let mut doc = sim1_doc();
        doc.effects.get_mut("gc").unwrap().insert("cms".into(), 1.0);
        assert!(matches!(
            Scenario::bind(doc, &space).unwrap_err(),
            ScenarioError::Space(SpaceError::NotAdmissible { .. })
        ));

        let mut doc = sim1_doc();
        doc.noise_amplitude = 1.0;
        assert_eq!(Scenario::bind(doc, &space).unwrap_err(), ScenarioError::BadNoise(1.0));

        let mut doc = sim1_doc();
        doc.effects.get_mut("gc").unwrap().insert("g1".into(), 0.0);
        assert!(matches!(
            Scenario::bind(doc, &space).unwrap_err(),
            ScenarioError::BadMultiplier { .. }
        ));

        let mut doc = sim1_doc();
        doc.stages.clear();
        assert_eq!(Scenario::bind(doc, &space).unwrap_err(), ScenarioError::NoStages);
    }
}
