//! Append-only JSON-Lines trial log.
//!
//! Layout: one `header` record, then one `trial` record per evaluation in
//! strictly increasing `trial_id` order, then optionally one `footer`.
//! Each append is flushed and synced before returning, so a crash loses at
//! most the trial being written; a torn final line is ignored on load.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{execute_run, FnSink, RunState, RunStatus, StopSignal, TrialSink};
use crate::runspec::{RunSpec, RunSpecDoc, Source, Strategy};
use crate::space::{SearchSpace, SpaceDoc, SpaceError};
use crate::trial::Trial;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("out-of-order trial id {got} (expected {expected})")]
    OutOfOrder { got: u64, expected: u64 },
    #[error("trial {0} already recorded with a different payload")]
    Conflict(u64),
    #[error("log is already closed by a footer")]
    Closed,
    #[error("{path}:{line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0}: log has no header")]
    MissingHeader(PathBuf),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub run_id: String,
    pub strategy: Strategy,
    pub budget: u64,
    pub cardinality: u64,
    /// Self-contained copy of the run specification.
    pub spec: RunSpecDoc,
    pub started_at: DateTime<Utc>,
}

impl RunHeader {
    pub fn for_spec(run_id: &str, spec: &RunSpec) -> Self {
        RunHeader {
            run_id: run_id.to_string(),
            strategy: spec.strategy,
            budget: spec.budget,
            cardinality: spec.space.cardinality(),
            spec: spec.snapshot(),
            started_at: Utc::now(),
        }
    }

    /// The search space embedded in the spec snapshot.
    pub fn space(&self) -> Result<SearchSpace, SpaceError> {
        match &self.spec.space {
            Source::Inline(value) => {
                let doc: SpaceDoc = serde_json::from_value(value.clone())
                    .map_err(|e| SpaceError::Document(e.to_string()))?;
                SearchSpace::try_from(doc)
            }
            Source::Path(path) => Err(SpaceError::Document(format!(
                "header references {} instead of embedding the space",
                path.display()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFooter {
    pub status: RunStatus,
    pub finished_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Header(RunHeader),
    Trial(Trial),
    Footer(RunFooter),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Appended {
    Written,
    /// Same id and payload as the last record; nothing was written.
    Duplicate,
}

pub struct TrialLogWriter {
    path: PathBuf,
    file: File,
    last: Option<(u64, String)>,
    records: usize,
    closed: bool,
}

impl TrialLogWriter {
    /// Creates a new log and writes its header. Refuses to overwrite.
    pub fn create(path: &Path, header: &RunHeader) -> Result<Self, StoreError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|source| StoreError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)
            .map_err(|source| StoreError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        let mut writer = TrialLogWriter {
            path: path.to_path_buf(),
            file,
            last: None,
            records: 0,
            closed: false,
        };
        writer.write_record(&LogRecord::Header(header.clone()))?;
        Ok(writer)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Number of records written, header included.
    pub fn len(&self) -> usize {
        self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records == 0
    }

    fn write_record(&mut self, record: &LogRecord) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(record).expect("log records serialize");
        line.push('\n');
        let io = |source| StoreError::Io {
            path: self.path.clone(),
            source,
        };
        self.file.write_all(line.as_bytes()).map_err(io)?;
        self.file.flush().map_err(io)?;
        self.file.sync_data().map_err(io)?;
        self.records += 1;
        Ok(())
    }

    pub fn append_trial(&mut self, trial: &Trial) -> Result<Appended, StoreError> {
        if self.closed {
            return Err(StoreError::Closed);
        }
        let payload = serde_json::to_string(trial).expect("trials serialize");
        if let Some((last_id, last_payload)) = &self.last {
            if trial.trial_id == *last_id {
                return if *last_payload == payload {
                    Ok(Appended::Duplicate)
                } else {
                    Err(StoreError::Conflict(trial.trial_id))
                };
            }
            if trial.trial_id != last_id + 1 {
                return Err(StoreError::OutOfOrder {
                    got: trial.trial_id,
                    expected: last_id + 1,
                });
            }
        }
        self.write_record(&LogRecord::Trial(trial.clone()))?;
        self.last = Some((trial.trial_id, payload));
        Ok(Appended::Written)
    }

    pub fn finish(&mut self, footer: &RunFooter) -> Result<(), StoreError> {
        if self.closed {
            return Err(StoreError::Closed);
        }
        self.write_record(&LogRecord::Footer(footer.clone()))?;
        self.closed = true;
        Ok(())
    }
}

impl TrialSink for TrialLogWriter {
    fn accept(&mut self, trial: &Trial) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
        self.append_trial(trial)?;
        Ok(())
    }
}

/// A run as recovered from its log.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub header: RunHeader,
    pub trials: Vec<Trial>,
    pub footer: Option<RunFooter>,
}

pub fn load_log(path: &Path) -> Result<RunLog, StoreError> {
    let file = File::open(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = BufReader::new(file);
    let mut header = None;
    let mut trials: Vec<Trial> = Vec::new();
    let mut footer = None;
    let mut line_no = 0;
    let mut buf = String::new();
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let complete_line = buf.ends_with('\n');
        if buf.trim().is_empty() {
            continue;
        }
        let corrupt = |message: String| StoreError::Corrupt {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let record: LogRecord = match serde_json::from_str(buf.trim_end()) {
            Ok(r) => r,
            // A torn final write.
            Err(_) if !complete_line => break,
            Err(e) => return Err(corrupt(e.to_string())),
        };
        if footer.is_some() {
            return Err(corrupt("record after footer".into()));
        }
        match record {
            LogRecord::Header(h) => {
                if header.is_some() || !trials.is_empty() {
                    return Err(corrupt("header must be the first record".into()));
                }
                header = Some(h);
            }
            LogRecord::Trial(t) => {
                if header.is_none() {
                    return Err(corrupt("trial before header".into()));
                }
                if let Some(prev) = trials.last() {
                    if t.trial_id <= prev.trial_id {
                        return Err(corrupt(format!(
                            "trial id {} does not follow {}",
                            t.trial_id, prev.trial_id
                        )));
                    }
                }
                trials.push(t);
            }
            LogRecord::Footer(f) => {
                if header.is_none() {
                    return Err(corrupt("footer before header".into()));
                }
                footer = Some(f);
            }
        }
    }
    let header = header.ok_or_else(|| StoreError::MissingHeader(path.to_path_buf()))?;
    Ok(RunLog {
        header,
        trials,
        footer,
    })
}

/// A fresh run identifier.
pub fn new_run_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

/// Executes `spec`, logging every trial to `path` before handing it to
/// `observe`, and closes the log with a footer.
pub fn run_logged(
    spec: &RunSpec,
    run_id: &str,
    path: &Path,
    stop: &StopSignal,
    observe: &mut dyn FnMut(&Trial),
) -> Result<RunState, StoreError> {
    let mut log = TrialLogWriter::create(path, &RunHeader::for_spec(run_id, spec))?;
    let mut sink = FnSink(|trial: &Trial| {
        log.append_trial(trial)?;
        observe(trial);
        Ok(())
    });
    let state = execute_run(spec, run_id, &mut sink, stop);
    log.finish(&RunFooter {
        status: state.status,
        finished_at: Utc::now(),
        cause: state.cause.clone(),
    })?;
    Ok(state)
}
