//! The optimization loop: candidate generation, serial evaluation, and
//! incumbent tracking.

use std::error::Error as StdError;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use chrono::Utc;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{run_external, ExecError, TargetSpec};
use crate::protocol::MeasurementProtocol;
use crate::runspec::{EvaluatorSpec, RunSpec, Strategy};
use crate::sim::Scenario;
use crate::space::{Configuration, SearchSpace, SpaceError};
use crate::trial::{Evaluation, Trial};

/// Default tolerance for "near-optimal" in [`time_to_within`].
pub const DEFAULT_NEAR_OPTIMAL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CandidateError {
    #[error("budget {budget} exceeds cardinality {cardinality}")]
    BudgetExceedsCardinality { budget: u64, cardinality: u64 },
}

#[derive(Debug, Error)]
pub enum EvaluatorError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("baseline mean must be positive, got {0}")]
pub struct NonPositiveBaseline(pub f64);

/// Grid order: indices `0, 1, 2, …` truncated at `budget`.
pub fn grid_candidates(space: &SearchSpace, budget: u64) -> impl Iterator<Item = u64> {
    0..budget.min(space.cardinality())
}

/// `budget` distinct indices drawn uniformly without replacement, in an
/// order fixed by `seed`.
pub fn random_candidates(
    space: &SearchSpace,
    budget: u64,
    seed: u64,
) -> Result<Vec<u64>, CandidateError> {
    let cardinality = space.cardinality();
    if budget > cardinality {
        return Err(CandidateError::BudgetExceedsCardinality {
            budget,
            cardinality,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(
        rand::seq::index::sample(&mut rng, cardinality as usize, budget as usize)
            .into_iter()
            .map(|i| i as u64)
            .collect(),
    )
}

/// The Complete trial with the lowest mean; ties go to the earliest trial.
pub fn best_trial<'a, I>(trials: I) -> Option<&'a Trial>
where
    I: IntoIterator<Item = &'a Trial>,
{
    trials
        .into_iter()
        .filter_map(|t| t.mean().map(|m| (t, m)))
        .min_by(|(a, ma), (b, mb)| ma.total_cmp(mb).then(a.trial_id.cmp(&b.trial_id)))
        .map(|(t, _)| t)
}

pub fn improvement_percent(baseline_mean: f64, best_mean: f64) -> Result<f64, NonPositiveBaseline> {
    if baseline_mean.is_nan() || baseline_mean <= 0.0 {
        return Err(NonPositiveBaseline(baseline_mean));
    }
    Ok(100.0 * (baseline_mean - best_mean) / baseline_mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WithinTarget {
    /// Candidate trials evaluated up to and including the first qualifying one.
    pub trials: u64,
    pub elapsed_s: f64,
}

/// Cumulative cost until the first Complete trial with mean at most
/// `global_best_mean × (1 + tolerance)`. Baseline trials are skipped.
pub fn time_to_within<'a, I>(trials: I, global_best_mean: f64, tolerance: f64) -> Option<WithinTarget>
where
    I: IntoIterator<Item = &'a Trial>,
{
    let threshold = global_best_mean * (1.0 + tolerance);
    let mut spent = WithinTarget {
        trials: 0,
        elapsed_s: 0.0,
    };
    for trial in trials.into_iter().filter(|t| !t.baseline) {
        spent.trials += 1;
        spent.elapsed_s += trial.elapsed_s;
        if trial.mean().is_some_and(|m| m <= threshold) {
            return Some(spent);
        }
    }
    None
}

pub trait Evaluator {
    fn evaluate(&mut self, config_index: u64, config: &Configuration)
        -> Result<Evaluation, EvaluatorError>;
}

pub struct SimEvaluator<'a> {
    pub scenario: &'a Scenario,
    pub protocol: MeasurementProtocol,
    pub seed: u64,
}

impl Evaluator for SimEvaluator<'_> {
    fn evaluate(&mut self, _: u64, config: &Configuration) -> Result<Evaluation, EvaluatorError> {
        Ok(self.scenario.evaluate(config, &self.protocol, self.seed)?)
    }
}

pub struct ExternalEvaluator<'a> {
    pub space: &'a SearchSpace,
    pub target: &'a TargetSpec,
    pub protocol: MeasurementProtocol,
}

impl Evaluator for ExternalEvaluator<'_> {
    fn evaluate(&mut self, _: u64, config: &Configuration) -> Result<Evaluation, EvaluatorError> {
        Ok(run_external(self.space, config, self.target, &self.protocol)?)
    }
}

/// Receives each trial as soon as it is produced, in trial-id order.
pub trait TrialSink {
    fn accept(&mut self, trial: &Trial) -> Result<(), Box<dyn StdError + Send + Sync>>;
}

impl TrialSink for Vec<Trial> {
    fn accept(&mut self, trial: &Trial) -> Result<(), Box<dyn StdError + Send + Sync>> {
        self.push(trial.clone());
        Ok(())
    }
}

/// Adapts a closure into a [`TrialSink`].
pub struct FnSink<F>(pub F);

impl<F> TrialSink for FnSink<F>
where
    F: FnMut(&Trial) -> Result<(), Box<dyn StdError + Send + Sync>>,
{
    fn accept(&mut self, trial: &Trial) -> Result<(), Box<dyn StdError + Send + Sync>> {
        (self.0)(trial)
    }
}

/// Cooperative stop flag, checked between trials.
#[derive(Debug, Clone, Default)]
pub struct StopSignal(Arc<AtomicBool>);

impl StopSignal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn raise(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_raised(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Pending,
    Running,
    Stopped,
    /// The candidate sequence ran out before the budget was spent.
    Exhausted,
    Finished,
}

impl RunStatus {
    pub fn is_terminal(&self) -> bool {
        matches!(self, RunStatus::Stopped | RunStatus::Exhausted | RunStatus::Finished)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub strategy: Strategy,
    pub budget: u64,
    pub cardinality: u64,
    pub status: RunStatus,
    pub baseline: Option<Trial>,
    /// Candidate trials, in evaluation order.
    pub trials: Vec<Trial>,
    pub incumbent: Option<Trial>,
    /// Why a run stopped abnormally.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
}

impl RunState {
    fn new(run_id: &str, spec: &RunSpec) -> Self {
        RunState {
            run_id: run_id.to_string(),
            strategy: spec.strategy,
            budget: spec.budget,
            cardinality: spec.space.cardinality(),
            status: RunStatus::Pending,
            baseline: None,
            trials: Vec::new(),
            incumbent: None,
            cause: None,
        }
    }

    fn record(&mut self, trial: Trial) {
        if trial.baseline {
            self.baseline = Some(trial);
            return;
        }
        if let Some(mean) = trial.mean() {
            if self.incumbent.as_ref().and_then(Trial::mean).is_none_or(|best| mean < best) {
                self.incumbent = Some(trial.clone());
            }
        }
        self.trials.push(trial);
    }

    fn abort(mut self, cause: String) -> Self {
        self.status = RunStatus::Stopped;
        self.cause = Some(cause);
        self
    }
}

/// Runs `spec` to completion (or until `stop` is raised) with the evaluator
/// it names.
pub fn execute_run(
    spec: &RunSpec,
    run_id: &str,
    sink: &mut dyn TrialSink,
    stop: &StopSignal,
) -> RunState {
    match &spec.evaluator {
        EvaluatorSpec::Sim { scenario, seed } => {
            let mut evaluator = SimEvaluator {
                scenario,
                protocol: spec.protocol,
                seed: *seed,
            };
            execute_with(spec, run_id, &mut evaluator, sink, stop)
        }
        EvaluatorSpec::External { target } => {
            let mut evaluator = ExternalEvaluator {
                space: &spec.space,
                target,
                protocol: spec.protocol,
            };
            execute_with(spec, run_id, &mut evaluator, sink, stop)
        }
    }
}

/// Evaluates the baseline, then each candidate in strategy order, one at a
/// time. Every trial reaches `sink` before the next evaluation starts.
pub fn execute_with(
    spec: &RunSpec,
    run_id: &str,
    evaluator: &mut dyn Evaluator,
    sink: &mut dyn TrialSink,
    stop: &StopSignal,
) -> RunState {
    let mut state = RunState::new(run_id, spec);
    let candidates: Box<dyn Iterator<Item = u64>> = match spec.strategy {
        Strategy::Grid => Box::new(grid_candidates(&spec.space, spec.budget)),
        Strategy::Random { seed } => match random_candidates(&spec.space, spec.budget, seed) {
            Ok(indices) => Box::new(indices.into_iter()),
            Err(e) => return state.abort(e.to_string()),
        },
    };
    let baseline_index = match spec.space.config_to_index(&spec.baseline) {
        Ok(i) => i,
        Err(e) => return state.abort(format!("baseline: {e}")),
    };
    state.status = RunStatus::Running;

    let mut next_id = 0u64;
    let mut run_one = |state: &mut RunState, index: u64, config: Configuration, baseline: bool| {
        let started_at = Utc::now();
        let evaluation = evaluator
            .evaluate(index, &config)
            .map_err(|e| format!("evaluator: {e}"))?;
        let trial = Trial {
            trial_id: next_id,
            baseline,
            config_index: index,
            configuration: config,
            status: evaluation.status,
            stats: evaluation.stats,
            samples: evaluation.samples,
            started_at,
            finished_at: Utc::now(),
            elapsed_s: evaluation.elapsed_s,
        };
        next_id += 1;
        sink.accept(&trial).map_err(|e| format!("trial sink: {e}"))?;
        state.record(trial);
        Ok::<(), String>(())
    };

    if stop.is_raised() {
        return state.abort("stop requested".into());
    }
    if let Err(cause) = run_one(&mut state, baseline_index, spec.baseline.clone(), true) {
        return state.abort(cause);
    }
    for index in candidates {
        if stop.is_raised() {
            state.status = RunStatus::Stopped;
            return state;
        }
        let config = match spec.space.index_to_config(index) {
            Ok(c) => c,
            Err(e) => return state.abort(e.to_string()),
        };
        if let Err(cause) = run_one(&mut state, index, config, false) {
            return state.abort(cause);
        }
    }
    state.status = if (state.trials.len() as u64) < spec.budget {
        RunStatus::Exhausted
    } else {
        RunStatus::Finished
    };
    state
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TrialStats;
    use crate::trial::TrialStatus;
    use std::collections::HashSet;

    fn space(params: &[usize]) -> SearchSpace {
        let parameters: Vec<_> = params
            .iter()
            .enumerate()
            .map(|(i, n)| {
                serde_json::json!({
                    "name": format!("p{i}"), "kind": "discrete",
                    "values": (0..*n as i64).collect::<Vec<_>>(), "default": 0
                })
            })
            .collect();
        crate::space::parse_space(
            &serde_json::json!({"name": "t", "parameters": parameters}).to_string(),
        )
        .unwrap()
    }

    fn trial(id: u64, mean: f64, complete: bool) -> Trial {
        Trial {
            trial_id: id,
            baseline: false,
            config_index: id,
            configuration: Configuration::new(),
            status: if complete {
                TrialStatus::Complete
            } else {
                TrialStatus::incomplete("timeout")
            },
            stats: Some(TrialStats {
                mean,
                min: mean,
                max: mean,
                count: 1,
                per_service: Default::default(),
            }),
            samples: vec![],
            started_at: Utc::now(),
            finished_at: Utc::now(),
            elapsed_s: 10.0,
        }
    }

    #[test]
    fn grid_order_and_truncation() {
        let s2 = space(&[3, 2]);
        assert_eq!(grid_candidates(&s2, 6).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(grid_candidates(&s2, 2).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(grid_candidates(&space(&[]), 1).collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn random_is_a_deterministic_sample_without_replacement() {
        let s = space(&[3, 2]);
        let mut all = random_candidates(&s, 6, 11).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(random_candidates(&s, 4, 9).unwrap(), random_candidates(&s, 4, 9).unwrap());
        assert_eq!(
            random_candidates(&s, 7, 0).unwrap_err(),
            CandidateError::BudgetExceedsCardinality { budget: 7, cardinality: 6 }
        );

        let big = space(&[3; 11]);
        let picks = random_candidates(&big, 500, 1).unwrap();
        assert_eq!(picks.iter().collect::<HashSet<_>>().len(), 500);
        assert!(picks.iter().all(|&i| i < 177_147));
    }

    #[test]
    fn best_trial_rules() {
        let trials = vec![trial(1, 0.81, true), trial(2, 0.7245, true), trial(3, 0.70, false)];
        assert_eq!(best_trial(&trials).unwrap().trial_id, 2);
        let incomplete = vec![trial(1, 0.5, false), trial(2, 0.4, false)];
        assert!(best_trial(&incomplete).is_none());
        let tied = vec![trial(4, 0.6, true), trial(2, 0.6, true), trial(3, 0.6, true)];
        assert_eq!(best_trial(&tied).unwrap().trial_id, 2);
    }

    #[test]
    fn improvement_examples() {
        assert!((improvement_percent(0.8100, 0.7245).unwrap() - 10.5556).abs() <= 1e-4);
        assert!((improvement_percent(0.8100, 0.7445).unwrap() - 8.0864).abs() <= 1e-4);
        assert_eq!(improvement_percent(0.5, 0.5).unwrap(), 0.0);
        assert!(improvement_percent(0.5, 0.6).unwrap() < 0.0);
        assert_eq!(improvement_percent(0.0, 0.1), Err(NonPositiveBaseline(0.0)));
    }

    #[test]
    fn time_to_within_examples() {
        let trials = vec![trial(1, 0.84, true), trial(2, 0.76, true), trial(3, 0.684, true)];
        let hit = time_to_within(&trials, 0.684, 0.05).unwrap();
        assert_eq!(hit, WithinTarget { trials: 3, elapsed_s: 30.0 });
        assert_eq!(time_to_within(&trials, 0.684, 0.5).unwrap().trials, 1);
        assert!(time_to_within(&trials, 0.5, 0.05).is_none());

        let with_incomplete = vec![trial(1, 0.1, false), trial(2, 0.7, true)];
        assert_eq!(time_to_within(&with_incomplete, 0.7, 0.0).unwrap().trials, 2);
    }

    struct Fixed(Vec<f64>);

    impl Evaluator for Fixed {
        fn evaluate(&mut self, index: u64, _: &Configuration) -> Result<Evaluation, EvaluatorError> {
            let mean = self.0[index as usize];
            Ok(Evaluation {
                status: TrialStatus::Complete,
                stats: Some(TrialStats { mean, min: mean, max: mean, count: 1, per_service: Default::default() }),
                samples: vec![mean],
                elapsed_s: mean,
            })
        }
    }

    fn spec_for(space: SearchSpace, strategy: Strategy, budget: u64) -> RunSpec {
        let doc = crate::sim::ScenarioDoc::parse(r#"{"stages": [["x", 1.0]]}"#).unwrap();
        RunSpec {
            baseline: space.default_configuration(),
            evaluator: EvaluatorSpec::Sim {
                scenario: Scenario::bind(doc, &space).unwrap(),
                seed: 0,
            },
            space,
            strategy,
            budget,
            protocol: MeasurementProtocol::default(),
        }
    }

    #[test]
    fn run_lifecycle() {
        let spec = spec_for(space(&[3, 2]), Strategy::Grid, 6);
        let mut sink = Vec::new();
        let mut eval = Fixed(vec![0.9, 0.5, 0.7, 0.5, 0.8, 0.6]);
        let state = execute_with(&spec, "r", &mut eval, &mut sink, &StopSignal::new());
        assert_eq!(state.status, RunStatus::Finished);
        assert_eq!(sink.len(), 7);
        assert!(sink[0].baseline && sink[0].trial_id == 0);
        assert_eq!(state.trials.len(), 6);
        assert_eq!(state.incumbent.as_ref().unwrap().config_index, 1);
        let ids: Vec<u64> = sink.iter().map(|t| t.trial_id).collect();
        assert_eq!(ids, (0..7).collect::<Vec<_>>());

        let over = spec_for(space(&[3, 2]), Strategy::Grid, 10);
        let state = execute_with(&over, "r", &mut eval, &mut Vec::new(), &StopSignal::new());
        assert_eq!(state.status, RunStatus::Exhausted);
        assert_eq!(state.trials.len(), 6);
    }

    #[test]
    fn stop_between_trials() {
        let spec = spec_for(space(&[3, 2]), Strategy::Grid, 6);
        let stop = StopSignal::new();
        let trigger = stop.clone();
        let mut seen = 0;
        let mut sink = FnSink(|t: &Trial| {
            if !t.baseline {
                seen += 1;
                if seen == 2 {
                    trigger.raise();
                }
            }
            Ok(())
        });
        let mut eval = Fixed(vec![0.9; 6]);
        let state = execute_with(&spec, "r", &mut eval, &mut sink, &stop);
        assert_eq!(state.status, RunStatus::Stopped);
        assert_eq!(state.trials.len(), 2);
        assert!(state.baseline.is_some());
    }

    #[test]
    fn sink_failure_aborts() {
        let spec = spec_for(space(&[2]), Strategy::Grid, 2);
        let mut sink = FnSink(|_: &Trial| Err("disk full".into()));
        let state = execute_with(&spec, "r", &mut Fixed(vec![1.0, 1.0]), &mut sink, &StopSignal::new());
        assert_eq!(state.status, RunStatus::Stopped);
        assert!(state.cause.unwrap().contains("disk full"));
    }
}
