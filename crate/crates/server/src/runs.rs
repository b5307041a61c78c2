use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;

use serde::Serialize;

use microtune_core::engine::{best_trial, RunStatus, StopSignal};
use microtune_core::report::{build_report, RunReport};
use microtune_core::runspec::{RunSpec, Strategy};
use microtune_core::space::Configuration;
use microtune_core::store::{new_run_id, run_logged};
use microtune_core::trial::Trial;

use crate::ApiError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Progress {
    /// Candidate trials evaluated so far; the baseline is not counted.
    pub trials_done: u64,
    pub budget: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IncumbentSummary {
    pub trial_id: u64,
    pub config_index: u64,
    pub configuration: Configuration,
    pub mean_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunHandle {
    pub run_id: String,
    pub status: RunStatus,
    pub strategy: Strategy,
    pub cardinality: u64,
    pub progress: Progress,
    pub incumbent: Option<IncumbentSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
}

/// A handle plus the report over the trials seen so far. `report` is absent
/// until the baseline has completed; `report_error` explains why otherwise.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunView {
    #[serde(flatten)]
    pub handle: RunHandle,
    pub report: Option<RunReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialPage {
    pub trials: Vec<Trial>,
    /// Pass back as `since` to receive only later trials.
    pub next: Option<u64>,
}

struct Live {
    status: RunStatus,
    trials: Vec<Trial>,
    cause: Option<String>,
}

struct RunEntry {
    run_id: String,
    strategy: Strategy,
    budget: u64,
    cardinality: u64,
    stop: StopSignal,
    live: Mutex<Live>,
}

impl RunEntry {
    fn live(&self) -> MutexGuard<'_, Live> {
        self.live.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    fn handle_from(&self, live: &Live) -> RunHandle {
        let incumbent = best_trial(live.trials.iter().filter(|t| !t.baseline)).map(|t| IncumbentSummary {
            trial_id: t.trial_id,
            config_index: t.config_index,
            configuration: t.configuration.clone(),
            mean_s: t.mean().expect("incumbents are complete"),
        });
        RunHandle {
            run_id: self.run_id.clone(),
            status: live.status,
            strategy: self.strategy,
            cardinality: self.cardinality,
            progress: Progress {
                trials_done: live.trials.iter().filter(|t| !t.baseline).count() as u64,
                budget: self.budget,
            },
            incumbent,
            cause: live.cause.clone(),
        }
    }
}

#[derive(Default)]
struct Registry {
    runs: HashMap<String, Arc<RunEntry>>,
    active: Option<Arc<RunEntry>>,
}

/// All runs known to this server, at most one of them active.
#[derive(Clone)]
pub struct RunRegistry {
    log_dir: Arc<PathBuf>,
    inner: Arc<Mutex<Registry>>,
}

impl RunRegistry {
    pub fn new(log_dir: PathBuf) -> Self {
        RunRegistry {
            log_dir: Arc::new(log_dir),
            inner: Arc::default(),
        }
    }

    /// Where the log of `run_id` is written.
    pub fn log_path(&self, run_id: &str) -> PathBuf {
        self.log_dir.join(format!("{run_id}.jsonl"))
    }

    fn registry(&self) -> MutexGuard<'_, Registry> {
        self.inner.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    fn get(&self, run_id: &str) -> Result<Arc<RunEntry>, ApiError> {
        self.registry()
            .runs
            .get(run_id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(run_id))
    }

    /// Registers `spec` and starts it on a worker thread.
    pub fn start(&self, spec: RunSpec) -> Result<RunHandle, ApiError> {
        let mut registry = self.registry();
        if let Some(active) = &registry.active {
            if !active.live().status.is_terminal() {
                return Err(ApiError::conflict(format!("run {} is still active", active.run_id)));
            }
        }
        let entry = Arc::new(RunEntry {
            run_id: new_run_id(),
            strategy: spec.strategy,
            budget: spec.budget,
            cardinality: spec.space.cardinality(),
            stop: StopSignal::new(),
            live: Mutex::new(Live {
                status: RunStatus::Pending,
                trials: Vec::new(),
                cause: None,
            }),
        });
        registry.runs.insert(entry.run_id.clone(), entry.clone());
        registry.active = Some(entry.clone());
        entry.live().status = RunStatus::Running;
        let handle = entry.handle_from(&entry.live());
        drop(registry);

        let path = self.log_path(&entry.run_id);
        let worker = entry.clone();
        thread::Builder::new()
            .name(format!("run-{}", entry.run_id))
            .spawn(move || {
                let outcome = catch_unwind(AssertUnwindSafe(|| {
                    run_logged(&spec, &worker.run_id, &path, &worker.stop, &mut |trial| {
                        worker.live().trials.push(trial.clone());
                    })
                }));
                let mut live = worker.live();
                match outcome {
                    Ok(Ok(state)) => {
                        live.status = state.status;
                        live.cause = state.cause;
                    }
                    Ok(Err(e)) => {
                        live.status = RunStatus::Stopped;
                        live.cause = Some(format!("trial log: {e}"));
                    }
                    Err(_) => {
                        live.status = RunStatus::Stopped;
                        live.cause = Some("run worker panicked".into());
                    }
                }
            })
            .map_err(|e| ApiError::internal(format!("cannot start worker: {e}")))?;
        Ok(handle)
    }

    pub fn handle(&self, run_id: &str) -> Result<RunHandle, ApiError> {
        let entry = self.get(run_id)?;
        let live = entry.live();
        Ok(entry.handle_from(&live))
    }

    pub fn view(&self, run_id: &str) -> Result<RunView, ApiError> {
        let entry = self.get(run_id)?;
        let live = entry.live();
        let handle = entry.handle_from(&live);
        let (report, report_error) = match build_report(run_id, entry.strategy, &live.trials) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Ok(RunView {
            handle,
            report,
            report_error,
        })
    }

    /// Trials with `trial_id > since`, or every trial when `since` is absent.
    pub fn trials(&self, run_id: &str, since: Option<u64>) -> Result<TrialPage, ApiError> {
        let entry = self.get(run_id)?;
        let live = entry.live();
        let trials: Vec<Trial> = live
            .trials
            .iter()
            .filter(|t| since.is_none_or(|s| t.trial_id > s))
            .cloned()
            .collect();
        let next = trials.last().map(|t| t.trial_id).or(since);
        Ok(TrialPage { trials, next })
    }

    /// Asks the run to stop after its in-flight trial. Idempotent.
    pub fn stop(&self, run_id: &str) -> Result<RunHandle, ApiError> {
        let entry = self.get(run_id)?;
        let live = entry.live();
        if !live.status.is_terminal() {
            entry.stop.raise();
        }
        Ok(entry.handle_from(&live))
    }
}
