//! Distributed-tracing records and the latency figures derived from them.
//!
//! End-to-end latency is the duration of the root span. Per-service latency
//! sums the durations of all spans attributed to a service.

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::MeasurementProtocol;

/// Slack allowed when checking that a child span lies inside its parent.
pub const NESTING_TOLERANCE_S: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TraceError {
    #[error("trace {0} has no spans")]
    Empty(String),
    #[error("trace {0} has no root span")]
    NoRoot(String),
    #[error("trace {trace_id} has {count} root spans")]
    MultipleRoots { trace_id: String, count: usize },
    #[error("trace {trace_id}: duplicate span id {span_id}")]
    DuplicateSpan { trace_id: String, span_id: String },
    #[error("trace {trace_id}: span {span_id} references unknown parent {parent_id}")]
    UnknownParent {
        trace_id: String,
        span_id: String,
        parent_id: String,
    },
    #[error("trace {trace_id}: span {span_id} lies outside its parent")]
    OutsideParent { trace_id: String, span_id: String },
    #[error("trace {trace_id}: span {span_id} has invalid timing")]
    InvalidTiming { trace_id: String, span_id: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("insufficient samples: {have} collected, warmup discards {warmup}")]
    InsufficientSamples { have: usize, warmup: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub span_id: String,
    pub parent_id: Option<String>,
    pub service: String,
    pub start_s: f64,
    pub duration_s: f64,
}

impl Span {
    fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub trace_id: String,
    pub spans: Vec<Span>,
}

impl Trace {
    pub fn root(&self) -> Result<&Span, TraceError> {
        if self.spans.is_empty() {
            return Err(TraceError::Empty(self.trace_id.clone()));
        }
        let mut roots = self.spans.iter().filter(|s| s.parent_id.is_none());
        match (roots.next(), roots.count()) {
            (None, _) => Err(TraceError::NoRoot(self.trace_id.clone())),
            (Some(root), 0) => Ok(root),
            (Some(_), extra) => Err(TraceError::MultipleRoots {
                trace_id: self.trace_id.clone(),
                count: extra + 1,
            }),
        }
    }

    /// Checks every structural invariant: a single root, unique span ids,
    /// resolvable parents, non-negative durations and proper nesting.
    pub fn validate(&self) -> Result<(), TraceError> {
        self.root()?;
        let mut ids = HashSet::new();
        for span in &self.spans {
            if !ids.insert(span.span_id.as_str()) {
                return Err(TraceError::DuplicateSpan {
                    trace_id: self.trace_id.clone(),
                    span_id: span.span_id.clone(),
                });
            }
            if !(span.duration_s >= 0.0 && span.start_s.is_finite() && span.duration_s.is_finite())
            {
                return Err(TraceError::InvalidTiming {
                    trace_id: self.trace_id.clone(),
                    span_id: span.span_id.clone(),
                });
            }
        }
        for span in &self.spans {
            let Some(parent_id) = &span.parent_id else {
                continue;
            };
            let parent = self
                .spans
                .iter()
                .find(|s| &s.span_id == parent_id)
                .ok_or_else(|| TraceError::UnknownParent {
                    trace_id: self.trace_id.clone(),
                    span_id: span.span_id.clone(),
                    parent_id: parent_id.clone(),
                })?;
            if span.start_s < parent.start_s - NESTING_TOLERANCE_S
                || span.end_s() > parent.end_s() + NESTING_TOLERANCE_S
            {
                return Err(TraceError::OutsideParent {
                    trace_id: self.trace_id.clone(),
                    span_id: span.span_id.clone(),
                });
            }
        }
        Ok(())
    }
}

pub fn end_to_end_latency(trace: &Trace) -> Result<f64, TraceError> {
    Ok(trace.root()?.duration_s)
}

pub fn per_service_latency(trace: &Trace) -> Result<BTreeMap<String, f64>, TraceError> {
    trace.root()?;
    let mut out = BTreeMap::new();
    for span in &trace.spans {
        *out.entry(span.service.clone()).or_insert(0.0) += span.duration_s;
    }
    Ok(out)
}

/// Reads JSON-Lines traces, one trace per non-blank line, validating each.
pub fn read_traces<R: BufRead>(reader: R) -> Result<Vec<Trace>, TraceError> {
    let mut traces = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let parse = |message: String| TraceError::Parse {
            line: i + 1,
            message,
        };
        let line = line.map_err(|e| parse(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let trace: Trace = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        trace.validate().map_err(|e| parse(e.to_string()))?;
        traces.push(trace);
    }
    Ok(traces)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub request_index: u64,
    pub end_to_end: f64,
    pub per_service: BTreeMap<String, f64>,
}

impl LatencySample {
    pub fn from_trace(request_index: u64, trace: &Trace) -> Result<Self, TraceError> {
        Ok(LatencySample {
            request_index,
            end_to_end: end_to_end_latency(trace)?,
            per_service: per_service_latency(trace)?,
        })
    }
}

/// Summary of the post-warmup samples of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
    /// Mean latency per service over the samples in which it appears.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_service: BTreeMap<String, f64>,
}

pub fn aggregate_samples(
    samples: &[LatencySample],
    protocol: &MeasurementProtocol,
) -> Result<TrialStats, TraceError> {
    let warmup = protocol.warmup as usize;
    if samples.len() <= warmup {
        return Err(TraceError::InsufficientSamples {
            have: samples.len(),
            warmup,
        });
    }
    let kept = &samples[warmup..];
    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut services: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for s in kept {
        sum += s.end_to_end;
        min = min.min(s.end_to_end);
        max = max.max(s.end_to_end);
        for (name, latency) in &s.per_service {
            let slot = services.entry(name.clone()).or_insert((0.0, 0));
            slot.0 += latency;
            slot.1 += 1;
        }
    }
    // Rounding can push the mean of a near-constant series a hair outside
    // its own range.
    let mean = (sum / kept.len() as f64).clamp(min, max);
    Ok(TrialStats {
        mean,
        min,
        max,
        count: kept.len(),
        per_service: services
            .into_iter()
            .map(|(name, (total, n))| (name, total / n as f64))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn span(id: &str, parent: Option<&str>, service: &str, start: f64, duration: f64) -> Span {
        Span {
            span_id: id.into(),
            parent_id: parent.map(Into::into),
            service: service.into(),
            start_s: start,
            duration_s: duration,
        }
    }

    fn sim1_trace() -> Trace {
        Trace {
            trace_id: "t".into(),
            spans: vec![
                span("root", None, "chain", 0.0, 0.684),
                span("a", Some("root"), "ingest", 0.0, 0.2565),
                span("b", Some("root"), "toll", 0.2565, 0.4275),
            ],
        }
    }

    fn sample(e2e: f64) -> LatencySample {
        LatencySample {
            request_index: 0,
            end_to_end: e2e,
            per_service: BTreeMap::new(),
        }
    }

    #[test]
    fn chain_trace_latencies() {
        let trace = sim1_trace();
        trace.validate().unwrap();
        assert_eq!(end_to_end_latency(&trace).unwrap(), 0.684);
        let per = per_service_latency(&trace).unwrap();
        assert_eq!(per["chain"], 0.684);
        assert_eq!(per["ingest"], 0.2565);
        assert_eq!(per["toll"], 0.4275);
    }

    #[test]
    fn single_span_and_repeated_service() {
        let single = Trace {
            trace_id: "s".into(),
            spans: vec![span("r", None, "svc", 0.0, 0.81)],
        };
        assert_eq!(end_to_end_latency(&single).unwrap(), 0.81);
        assert_eq!(per_service_latency(&single).unwrap()["svc"], 0.81);

        let repeated = Trace {
            trace_id: "r".into(),
            spans: vec![
                span("r", None, "front", 0.0, 1.0),
                span("x", Some("r"), "db", 0.0, 0.1),
                span("y", Some("r"), "db", 0.5, 0.2),
            ],
        };
        assert!((per_service_latency(&repeated).unwrap()["db"] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn root_errors() {
        let two_roots = Trace {
            trace_id: "t".into(),
            spans: vec![span("a", None, "x", 0.0, 1.0), span("b", None, "y", 0.0, 1.0)],
        };
        assert!(matches!(
            end_to_end_latency(&two_roots),
            Err(TraceError::MultipleRoots { count: 2, .. })
        ));
        let orphan = Trace {
            trace_id: "t".into(),
            spans: vec![span("a", Some("z"), "x", 0.0, 1.0)],
        };
        assert!(matches!(end_to_end_latency(&orphan), Err(TraceError::NoRoot(_))));
        let empty = Trace { trace_id: "t".into(), spans: vec![] };
        assert!(matches!(per_service_latency(&empty), Err(TraceError::Empty(_))));
    }

    #[test]
    fn validation_catches_structure() {
        let mut t = sim1_trace();
        t.spans[2].duration_s = 0.5;
        assert!(matches!(t.validate(), Err(TraceError::OutsideParent { .. })));

        let mut t = sim1_trace();
        t.spans[1].parent_id = Some("nope".into());
        assert!(matches!(t.validate(), Err(TraceError::UnknownParent { .. })));

        let mut t = sim1_trace();
        t.spans[2].span_id = "a".into();
        assert!(matches!(t.validate(), Err(TraceError::DuplicateSpan { .. })));

        let mut t = sim1_trace();
        t.spans[1].duration_s = -0.1;
        assert!(matches!(t.validate(), Err(TraceError::InvalidTiming { .. })));
    }

    #[test]
    fn reads_json_lines() {
        let text = concat!(
            r#"{"trace_id":"1","spans":[{"span_id":"r","parent_id":null,"service":"svc","start_s":0,"duration_s":0.81}]}"#,
            "\n\n",
            r#"{"trace_id":"2","spans":[{"span_id":"r","parent_id":null,"service":"svc","start_s":0,"duration_s":0.5}]}"#,
            "\n"
        );
        let traces = read_traces(text.as_bytes()).unwrap();
        assert_eq!(traces.len(), 2);
        assert_eq!(end_to_end_latency(&traces[1]).unwrap(), 0.5);

        let err = read_traces("{\"trace_id\":\"x\",\"spans\":[]}\n".as_bytes()).unwrap_err();
        assert!(matches!(err, TraceError::Parse { line: 1, .. }));
    }

    #[test]
    fn aggregation_examples() {
        let protocol = MeasurementProtocol::new(3, 1, 10.0).unwrap();
        let stats = aggregate_samples(&[sample(0.8), sample(1.0), sample(0.9)], &protocol).unwrap();
        assert!((stats.mean - 0.95).abs() < 1e-12);
        assert_eq!((stats.min, stats.max, stats.count), (0.9, 1.0, 2));

        let constant: Vec<_> = (0..50).map(|_| sample(0.81)).collect();
        let stats = aggregate_samples(&constant, &MeasurementProtocol::default()).unwrap();
        assert_eq!(stats.mean, 0.81);
        assert_eq!(stats.count, 45);

        let err = aggregate_samples(&[sample(1.0), sample(1.0), sample(1.0)], &MeasurementProtocol::default()).unwrap_err();
        assert_eq!(err, TraceError::InsufficientSamples { have: 3, warmup: 5 });
        assert!(err.to_string().contains("insufficient samples"));
    }

    proptest! {
        #[test]
        fn latencies_ignore_span_order(perm in Just((0..3usize).collect::<Vec<_>>()).prop_shuffle()) {
            let base = sim1_trace();
            let shuffled = Trace {
                trace_id: base.trace_id.clone(),
                spans: perm.iter().map(|&i| base.spans[i].clone()).collect(),
            };
            prop_assert_eq!(end_to_end_latency(&shuffled).unwrap(), end_to_end_latency(&base).unwrap());
            prop_assert_eq!(per_service_latency(&shuffled).unwrap(), per_service_latency(&base).unwrap());
        }

        #[test]
        fn mean_within_range(values in prop::collection::vec(0.0f64..10.0, 2..60), warmup in 0u32..2) {
            let samples: Vec<_> = values.iter().map(|&v| sample(v)).collect();
            let protocol = MeasurementProtocol::new(values.len() as u32, warmup, 1.0).unwrap();
            let stats = aggregate_samples(&samples, &protocol).unwrap();
            prop_assert!(stats.min <= stats.mean && stats.mean <= stats.max);
        }
    }
}
