//! Run specification files.
//!
//! A run file references (or inlines) a search space, a strategy, a
//! measurement protocol and an evaluator. File references resolve against
//! the directory of the run file (or an explicit base directory for
//! documents received over the API).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{ExecError, TargetSpec};
use crate::protocol::{MeasurementProtocol, ProtocolError};
use crate::sim::{Scenario, ScenarioDoc, ScenarioError};
use crate::space::{Configuration, SearchSpace, SpaceError, SpaceDoc};

#[derive(Debug, Error)]
pub enum RunSpecError {
    #[error("malformed run spec: {0}")]
    Document(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("search space: {0}")]
    Space(#[from] SpaceError),
    #[error("scenario: {0}")]
    Scenario(#[from] ScenarioError),
    #[error("target: {0}")]
    Target(#[from] ExecError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("random search requires an explicit budget")]
    MissingBudget,
    #[error("invalid budget: {0}")]
    Budget(String),
}

/// Either a path to a JSON file or the JSON document itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source {
    Path(PathBuf),
    Inline(serde_json::Value),
}

impl Source {
    fn read(&self, base: &Path) -> Result<(serde_json::Value, PathBuf), RunSpecError> {
        match self {
            Source::Inline(value) => Ok((value.clone(), base.to_path_buf())),
            Source::Path(rel) => {
                let path = base.join(rel);
                let text = std::fs::read_to_string(&path).map_err(|e| RunSpecError::Io {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                let value = serde_json::from_str(&text).map_err(|e| RunSpecError::Io {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
                Ok((value, dir))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum StrategyDoc {
    Grid {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        budget: Option<u64>,
    },
    Random {
        #[serde(default)]
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        budget: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum EvaluatorDoc {
    Sim {
        scenario: Source,
        /// Keys the simulated measurement noise.
        #[serde(default)]
        seed: u64,
    },
    External { target: Source },
}

/// Wire form of a run file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpecDoc {
    pub space: Source,
    pub strategy: StrategyDoc,
    #[serde(default)]
    pub protocol: MeasurementProtocol,
    pub evaluator: EvaluatorDoc,
    /// Partial assignment; unnamed parameters take their default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BTreeMap<String, serde_json::Value>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Strategy {
    Grid,
    Random { seed: u64 },
}

impl Strategy {
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::Grid => "grid",
            Strategy::Random { .. } => "random",
        }
    }
}

#[derive(Debug, Clone)]
pub enum EvaluatorSpec {
    Sim { scenario: Scenario, seed: u64 },
    External { target: TargetSpec },
}

/// A fully resolved and validated run.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub space: SearchSpace,
    pub strategy: Strategy,
    /// Maximum number of candidate trials (the baseline is not counted).
    pub budget: u64,
    pub protocol: MeasurementProtocol,
    pub evaluator: EvaluatorSpec,
    pub baseline: Configuration,
}

impl RunSpec {
    pub fn load(path: &Path) -> Result<Self, RunSpecError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunSpecError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(document: &str, base: &Path) -> Result<Self, RunSpecError> {
        let doc: RunSpecDoc =
            serde_json::from_str(document).map_err(|e| RunSpecError::Document(e.to_string()))?;
        Self::from_doc(&doc, base)
    }

    pub fn from_doc(doc: &RunSpecDoc, base: &Path) -> Result<Self, RunSpecError> {
        let (space_json, _) = doc.space.read(base)?;
        let space_doc: SpaceDoc = serde_json::from_value(space_json)
            .map_err(|e| SpaceError::Document(e.to_string()))?;
        let space = SearchSpace::try_from(space_doc)?;
        doc.protocol.validate()?;

        let cardinality = space.cardinality();
        let (strategy, budget) = match doc.strategy {
            StrategyDoc::Grid { budget } => (Strategy::Grid, budget.unwrap_or(cardinality)),
            StrategyDoc::Random { seed, budget } => {
                let budget = budget.ok_or(RunSpecError::MissingBudget)?;
                if budget > cardinality {
                    return Err(RunSpecError::Budget(format!(
                        "random budget {budget} exceeds cardinality {cardinality}"
                    )));
                }
                (Strategy::Random { seed }, budget)
            }
        };
        if budget == 0 {
            return Err(RunSpecError::Budget("budget must be at least 1".into()));
        }

        let evaluator = match &doc.evaluator {
            EvaluatorDoc::Sim { scenario, seed } => {
                let (json, _) = scenario.read(base)?;
                let scenario_doc: ScenarioDoc = serde_json::from_value(json)
                    .map_err(|e| ScenarioError::Document(e.to_string()))?;
                EvaluatorSpec::Sim {
                    scenario: Scenario::bind(scenario_doc, &space)?,
                    seed: *seed,
                }
            }
            EvaluatorDoc::External { target } => {
                let (json, dir) = target.read(base)?;
                let mut target: TargetSpec = serde_json::from_value(json)
                    .map_err(|e| ExecError::Document(e.to_string()))?;
                target.anchor(&dir);
                target.validate()?;
                EvaluatorSpec::External { target }
            }
        };

        let mut baseline = space.default_configuration();
        if let Some(assignment) = &doc.baseline {
            for (name, raw) in assignment {
                let param = space
                    .parameter(name)
                    .ok_or_else(|| SpaceError::UnknownParameter(name.clone()))?;
                baseline.insert(name.clone(), param.parse_admissible(raw)?);
            }
            space.validate_config(&baseline)?;
        }

        Ok(RunSpec {
            space,
            strategy,
            budget,
            protocol: doc.protocol,
            evaluator,
            baseline,
        })
    }

    /// A self-contained document equivalent to this spec, with every
    /// referenced file inlined.
    pub fn snapshot(&self) -> RunSpecDoc {
        let inline = |v: serde_json::Value| Source::Inline(v);
        let strategy = match self.strategy {
            Strategy::Grid => StrategyDoc::Grid {
                budget: Some(self.budget),
            },
            Strategy::Random { seed } => StrategyDoc::Random {
                seed,
                budget: Some(self.budget),
            },
        };
        let evaluator = match &self.evaluator {
            EvaluatorSpec::Sim { scenario, seed } => EvaluatorDoc::Sim {
                scenario: inline(serde_json::to_value(scenario.doc()).expect("serializable")),
                seed: *seed,
            },
            EvaluatorSpec::External { target } => EvaluatorDoc::External {
                target: inline(serde_json::to_value(target).expect("serializable")),
            },
        };
        RunSpecDoc {
            space: inline(serde_json::to_value(&self.space).expect("serializable")),
            strategy,
            protocol: self.protocol,
            evaluator,
            baseline: Some(
                self.baseline
                    .iter()
                    .map(|(k, v)| (k.to_string(), serde_json::to_value(v).expect("serializable")))
                    .collect(),
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::Value;
    use serde_json::json;

    fn doc(strategy: serde_json::Value) -> String {
        json!({
            "space": {"name": "s2", "parameters": [
                {"name": "gc", "kind": "categorical", "values": ["serial", "g1", "zgc"], "default": "g1"},
                {"name": "heap", "kind": "byte", "values": ["256m", "512m"], "default": "256m"}
            ]},
            "strategy": strategy,
            "protocol": {"requests": 10, "warmup": 2},
            "evaluator": {"type": "sim", "scenario": {"stages": [["a", 0.5]]}}
        })
        .to_string()
    }

    #[test]
    fn budgets_resolve() {
        let grid = RunSpec::parse(&doc(json!({"type": "grid"})), Path::new(".")).unwrap();
        assert_eq!(grid.budget, 6);
        assert_eq!(grid.strategy, Strategy::Grid);
        assert_eq!(grid.baseline.get("gc"), Some(&Value::from("g1")));

        let random =
            RunSpec::parse(&doc(json!({"type": "random", "seed": 3, "budget": 4})), Path::new("."))
                .unwrap();
        assert_eq!((random.budget, random.strategy), (4, Strategy::Random { seed: 3 }));

        assert!(matches!(
            RunSpec::parse(&doc(json!({"type": "random", "seed": 3})), Path::new(".")),
            Err(RunSpecError::MissingBudget)
        ));
        assert!(matches!(
            RunSpec::parse(&doc(json!({"type": "random", "budget": 7})), Path::new(".")),
            Err(RunSpecError::Budget(_))
        ));
        assert!(matches!(
            RunSpec::parse(&doc(json!({"type": "grid", "budget": 0})), Path::new(".")),
            Err(RunSpecError::Budget(_))
        ));
    }

    #[test]
    fn snapshot_round_trips() {
        let mut raw: serde_json::Value = serde_json::from_str(&doc(json!({"type": "grid"}))).unwrap();
        raw["baseline"] = json!({"heap": "512m"});
        let spec = RunSpec::parse(&raw.to_string(), Path::new(".")).unwrap();
        assert_eq!(spec.baseline.get("heap"), Some(&Value::Int(536_870_912)));
        let again = RunSpec::from_doc(&spec.snapshot(), Path::new("/nonexistent")).unwrap();
        assert_eq!(again.space, spec.space);
        assert_eq!(again.baseline, spec.baseline);
        assert_eq!(again.budget, spec.budget);
        assert_eq!(
            serde_json::to_string(&again.snapshot()).unwrap(),
            serde_json::to_string(&spec.snapshot()).unwrap()
        );
    }

    #[test]
    fn bad_baseline_is_rejected() {
        let mut raw: serde_json::Value = serde_json::from_str(&doc(json!({"type": "grid"}))).unwrap();
        raw["baseline"] = json!({"gc": "cms"});
        assert!(matches!(
            RunSpec::parse(&raw.to_string(), Path::new(".")),
            Err(RunSpecError::Space(SpaceError::NotAdmissible { .. }))
        ));
    }
}
