//! Evaluates a configuration against a real target process.
//!
//! The target is launched with the rendered flags, awaited until ready, then
//! a workload command drives requests and writes JSON-Lines traces to
//! `trace_source`. Teardown runs exactly once per evaluation whatever the
//! outcome. Failures that belong to the configuration under test become
//! Incomplete trials; failures of the target description itself (an
//! unresolvable command, say) are returned as [`ExecError`] and abort the run.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::MeasurementProtocol;
use crate::space::{Configuration, RenderedConfig, SearchSpace, SpaceError};
use crate::trace::{aggregate_samples, read_traces, LatencySample};
use crate::trial::{reason, Evaluation, TrialStatus};

const POLL: Duration = Duration::from_millis(10);

pub const RUNTIME_FLAGS: &str = "{runtime_flags}";
pub const CONTAINER_FLAGS: &str = "{container_flags}";
pub const TRACE_SOURCE: &str = "{trace_source}";

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("malformed target document: {0}")]
    Document(String),
    #[error("invalid target: {0}")]
    Invalid(String),
    #[error("command `{0}` cannot be resolved")]
    Unresolvable(String),
    #[error(transparent)]
    Config(#[from] SpaceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Readiness {
    /// Re-run `probe` every `interval_s` until it exits successfully.
    Probe {
        probe: Vec<String>,
        #[serde(default = "default_probe_timeout")]
        timeout_s: f64,
        #[serde(default = "default_probe_interval")]
        interval_s: f64,
    },
    Delay { delay_s: f64 },
}

fn default_probe_timeout() -> f64 {
    30.0
}

fn default_probe_interval() -> f64 {
    0.1
}

impl Default for Readiness {
    fn default() -> Self {
        Readiness::Delay { delay_s: 0.0 }
    }
}

/// How to launch, drive and observe one target.
///
/// Every command is an argument vector. Arguments equal to
/// `{runtime_flags}` or `{container_flags}` expand to one argument per
/// flag; occurrences inside a longer argument are replaced by the
/// space-joined flags. `{trace_source}` expands to the trace file path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub launch_command: Vec<String>,
    #[serde(default)]
    pub environment: BTreeMap<String, String>,
    pub workload_command: Vec<String>,
    #[serde(default)]
    pub readiness: Readiness,
    pub trace_source: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teardown_command: Option<Vec<String>>,
    /// Directory commands run in and relative paths resolve against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub working_dir: Option<PathBuf>,
}

impl TargetSpec {
    pub fn parse(document: &str) -> Result<Self, ExecError> {
        serde_json::from_str(document).map_err(|e| ExecError::Document(e.to_string()))
    }

    /// Loads a target file; a missing or relative `working_dir` resolves
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ExecError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExecError::Document(format!("{}: {e}", path.display())))?;
        let mut spec = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        spec.anchor(base);
        Ok(spec)
    }

    /// Makes `working_dir` absolute relative to `base`.
    pub fn anchor(&mut self, base: &Path) {
        let base = std::path::absolute(base).unwrap_or_else(|_| base.to_path_buf());
        self.working_dir = Some(match self.working_dir.take() {
            Some(dir) if dir.is_absolute() => dir,
            Some(dir) => base.join(dir),
            None => base,
        });
    }

    fn working_dir(&self) -> PathBuf {
        self.working_dir
            .clone()
            .unwrap_or_else(|| std::env::current_dir().unwrap_or_else(|_| PathBuf::from(".")))
    }

    fn trace_path(&self) -> PathBuf {
        if self.trace_source.is_absolute() {
            self.trace_source.clone()
        } else {
            self.working_dir().join(&self.trace_source)
        }
    }

    pub fn validate(&self) -> Result<(), ExecError> {
        if self.launch_command.is_empty() {
            return Err(ExecError::Invalid("launch_command must not be empty".into()));
        }
        if self.workload_command.is_empty() {
            return Err(ExecError::Invalid("workload_command must not be empty".into()));
        }
        if matches!(&self.teardown_command, Some(cmd) if cmd.is_empty()) {
            return Err(ExecError::Invalid("teardown_command must not be empty".into()));
        }
        match &self.readiness {
            Readiness::Delay { delay_s } if !(*delay_s >= 0.0 && delay_s.is_finite()) => {
                Err(ExecError::Invalid("readiness delay must be non-negative".into()))
            }
            Readiness::Probe { probe, .. } if probe.is_empty() => {
                Err(ExecError::Invalid("readiness probe must not be empty".into()))
            }
            Readiness::Probe { timeout_s, interval_s, .. }
                if !(*timeout_s > 0.0 && *interval_s >= 0.0) =>
            {
                Err(ExecError::Invalid("probe timeout must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Expands placeholders in one argument vector.
pub fn substitute(args: &[String], rendered: &RenderedConfig, trace_path: &Path) -> Vec<String> {
    let trace = trace_path.to_string_lossy();
    let runtime = rendered.runtime_flags.join(" ");
    let container = rendered.container_flags.join(" ");
    let mut out = Vec::with_capacity(args.len());
    for arg in args {
        match arg.as_str() {
            RUNTIME_FLAGS => out.extend(rendered.runtime_flags.iter().cloned()),
            CONTAINER_FLAGS => out.extend(rendered.container_flags.iter().cloned()),
            _ => out.push(
                arg.replace(RUNTIME_FLAGS, &runtime)
                    .replace(CONTAINER_FLAGS, &container)
                    .replace(TRACE_SOURCE, &trace),
            ),
        }
    }
    out
}

fn resolve_program(program: &str, working_dir: &Path) -> Result<PathBuf, ExecError> {
    let unresolvable = || ExecError::Unresolvable(program.to_string());
    if program.contains('/') {
        let path = working_dir.join(program);
        return if path.is_file() { Ok(path) } else { Err(unresolvable()) };
    }
    std::env::var_os("PATH")
        .and_then(|paths| {
            std::env::split_paths(&paths)
                .map(|dir| dir.join(program))
                .find(|candidate| candidate.is_file())
        })
        .ok_or_else(unresolvable)
}

struct Prepared {
    program: PathBuf,
    args: Vec<String>,
}

struct Plan {
    launch: Prepared,
    probe: Option<Prepared>,
    workload: Prepared,
    teardown: Option<Prepared>,
    env: BTreeMap<String, String>,
    working_dir: PathBuf,
}

impl Plan {
    fn command(&self, prepared: &Prepared) -> Command {
        let mut cmd = Command::new(&prepared.program);
        cmd.args(&prepared.args)
            .current_dir(&self.working_dir)
            .envs(&self.env)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null());
        #[cfg(unix)]
        {
            use std::os::unix::process::CommandExt;
            cmd.process_group(0);
        }
        cmd
    }
}

/// Kills the child's whole process group and reaps it.
fn terminate(child: &mut Child) {
    #[cfg(unix)]
    {
        let pid = child.id() as libc::pid_t;
        unsafe {
            libc::kill(-pid, libc::SIGKILL);
        }
    }
    let _ = child.kill();
    let _ = child.wait();
}

enum Waited {
    Exited(ExitStatus),
    TimedOut,
}

fn wait_until(child: &mut Child, deadline: Instant) -> Waited {
    loop {
        match child.try_wait() {
            Ok(Some(status)) => return Waited::Exited(status),
            Ok(None) if Instant::now() >= deadline => {
                terminate(child);
                return Waited::TimedOut;
            }
            Ok(None) => thread::sleep(POLL),
            Err(_) => {
                terminate(child);
                return Waited::TimedOut;
            }
        }
    }
}

fn secs(s: f64) -> Duration {
    Duration::from_secs_f64(s.max(0.0))
}

/// Launches the target, measures it under `protocol`, and tears it down.
pub fn run_external(
    space: &SearchSpace,
    config: &Configuration,
    target: &TargetSpec,
    protocol: &MeasurementProtocol,
) -> Result<Evaluation, ExecError> {
    target.validate()?;
    let rendered = space.render(config)?;
    let working_dir = target.working_dir();
    let trace_path = target.trace_path();

    let prepare = |args: &[String]| -> Result<Prepared, ExecError> {
        let args = substitute(args, &rendered, &trace_path);
        let program = resolve_program(&args[0], &working_dir)?;
        Ok(Prepared {
            program,
            args: args[1..].to_vec(),
        })
    };
    let mut env = target.environment.clone();
    env.extend(rendered.environment.clone());
    env.insert("MICROTUNE_RUNTIME_FLAGS".into(), rendered.runtime_flags.join(" "));
    env.insert("MICROTUNE_CONTAINER_FLAGS".into(), rendered.container_flags.join(" "));
    env.insert("MICROTUNE_TRACE_FILE".into(), trace_path.to_string_lossy().into_owned());
    env.insert("MICROTUNE_REQUESTS".into(), protocol.requests.to_string());

    let plan = Plan {
        launch: prepare(&target.launch_command)?,
        probe: match &target.readiness {
            Readiness::Probe { probe, .. } => Some(prepare(probe)?),
            Readiness::Delay { .. } => None,
        },
        workload: prepare(&target.workload_command)?,
        teardown: target.teardown_command.as_deref().map(prepare).transpose()?,
        env,
        working_dir: working_dir.clone(),
    };

    if trace_path.exists() {
        let _ = std::fs::remove_file(&trace_path);
    }

    let started = Instant::now();
    let deadline = started + secs(protocol.timeout_s);
    let mut launched: Option<Child> = None;
    let outcome = measure(&plan, target, protocol, &trace_path, deadline, &mut launched);
    let elapsed_s = started.elapsed().as_secs_f64();

    if let Some(teardown) = &plan.teardown {
        if let Ok(mut child) = plan.command(teardown).spawn() {
            wait_until(&mut child, Instant::now() + secs(protocol.timeout_s));
        }
    }
    if let Some(mut child) = launched {
        terminate(&mut child);
    }

    let (status, samples) = outcome;
    let stats = aggregate_samples(&samples, protocol).ok();
    Ok(Evaluation {
        status,
        stats,
        samples: samples.iter().map(|s| s.end_to_end).collect(),
        elapsed_s,
    })
}

fn measure(
    plan: &Plan,
    target: &TargetSpec,
    protocol: &MeasurementProtocol,
    trace_path: &Path,
    deadline: Instant,
    launched: &mut Option<Child>,
) -> (TrialStatus, Vec<LatencySample>) {
    let fail = |reason: &str, detail: String| (TrialStatus::incomplete_with(reason, detail), Vec::new());

    let child = match plan.command(&plan.launch).spawn() {
        Ok(child) => launched.insert(child),
        Err(e) => return fail(reason::LAUNCH_FAILED, e.to_string()),
    };
    let launch_died = |child: &mut Child| match child.try_wait() {
        Ok(Some(status)) if !status.success() => Some(format!("target exited with {status}")),
        _ => None,
    };

    match &target.readiness {
        Readiness::Delay { delay_s } => {
            let ready_at = Instant::now() + secs(*delay_s);
            if ready_at > deadline {
                return fail(
                    reason::READINESS_TIMEOUT,
                    format!("readiness delay {delay_s}s exceeds the trial timeout"),
                );
            }
            while Instant::now() < ready_at {
                if let Some(detail) = launch_died(child) {
                    return fail(reason::LAUNCH_FAILED, detail);
                }
                thread::sleep(POLL.min(ready_at.saturating_duration_since(Instant::now())));
            }
        }
        Readiness::Probe { timeout_s, interval_s, .. } => {
            let probe = plan.probe.as_ref().expect("prepared with readiness");
            let give_up = (Instant::now() + secs(*timeout_s)).min(deadline);
            loop {
                if let Some(detail) = launch_died(child) {
                    return fail(reason::LAUNCH_FAILED, detail);
                }
                let ready = match plan.command(probe).spawn() {
                    Ok(mut p) => matches!(wait_until(&mut p, give_up), Waited::Exited(s) if s.success()),
                    Err(_) => false,
                };
                if ready {
                    break;
                }
                if Instant::now() >= give_up {
                    return fail(
                        reason::READINESS_TIMEOUT,
                        format!("probe did not succeed within {timeout_s}s"),
                    );
                }
                thread::sleep(secs(*interval_s).min(give_up.saturating_duration_since(Instant::now())));
            }
        }
    }
    if let Some(detail) = launch_died(child) {
        return fail(reason::LAUNCH_FAILED, detail);
    }

    let mut workload = match plan.command(&plan.workload).spawn() {
        Ok(w) => w,
        Err(e) => return fail(reason::WORKLOAD_FAILED, e.to_string()),
    };
    match wait_until(&mut workload, deadline) {
        Waited::TimedOut => {
            return fail(
                reason::TIMEOUT,
                format!("workload exceeded {}s", protocol.timeout_s),
            )
        }
        Waited::Exited(status) if !status.success() => {
            return fail(reason::WORKLOAD_FAILED, format!("workload exited with {status}"))
        }
        Waited::Exited(_) => {}
    }

    let traces = match File::open(trace_path) {
        Ok(f) => read_traces(BufReader::new(f)),
        Err(e) => return fail(reason::TRACES_MISSING, format!("{}: {e}", trace_path.display())),
    };
    let traces = match traces {
        Ok(t) => t,
        Err(e) => return fail(reason::TRACES_MISSING, e.to_string()),
    };
    let samples: Vec<LatencySample> = traces
        .iter()
        .take(protocol.requests as usize)
        .enumerate()
        .map(|(i, t)| LatencySample::from_trace(i as u64, t).expect("validated trace"))
        .collect();
    if traces.len() < protocol.requests as usize {
        let detail = format!("{} of {} traces", traces.len(), protocol.requests);
        return (TrialStatus::incomplete_with(reason::TRACES_MISSING, detail), samples);
    }
    if Instant::now() > deadline {
        let detail = format!("trial exceeded {}s", protocol.timeout_s);
        return (TrialStatus::incomplete_with(reason::TIMEOUT, detail), samples);
    }
    (TrialStatus::Complete, samples)
}
