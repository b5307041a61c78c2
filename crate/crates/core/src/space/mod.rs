//! Typed, bounded configuration search spaces.
//!
//! A [`SearchSpace`] is an ordered list of [`ParameterSpec`]s. Every
//! configuration of the space corresponds to exactly one integer index in
//! `0..cardinality`, decoded mixed-radix with the first enabled parameter
//! as the most significant digit and the last enabled parameter varying
//! fastest. Disabled parameters are pinned to their default value and
//! contribute a factor of one to the cardinality.

mod bytes;
mod render;

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bytes::{format_byte_size, parse_byte_size, ByteSizeError};
pub use render::{RenderRule, RenderTarget, RenderedConfig};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpaceError {
    #[error("malformed search-space document: {0}")]
    Document(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("parameter `{0}`: values must not be empty")]
    EmptyValues(String),
    #[error("parameter `{parameter}`: duplicate value {value}")]
    DuplicateValue { parameter: String, value: String },
    #[error("parameter `{parameter}`: default {default} not in values")]
    DefaultNotInValues { parameter: String, default: String },
    #[error("parameter `{0}`: boolean parameters must list values [false, true]")]
    BooleanValues(String),
    #[error("parameter `{parameter}`: {message}")]
    InvalidValue { parameter: String, message: String },
    #[error("parameter `{parameter}`: invalid render rule: {message}")]
    Render { parameter: String, message: String },
    #[error("search space cardinality overflows 64 bits")]
    TooLarge,
    #[error("index {index} out of range (cardinality {cardinality})")]
    IndexOutOfRange { index: u64, cardinality: u64 },
    #[error("configuration is missing parameter `{0}`")]
    MissingParameter(String),
    #[error("configuration names unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{parameter}`: value {value} not admissible")]
    NotAdmissible { parameter: String, value: String },
    #[error("parameter `{parameter}` is disabled and must keep its default, got {value}")]
    DisabledNotDefault { parameter: String, value: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParameterKind {
    Boolean,
    Discrete,
    Byte,
    Categorical,
}

impl fmt::Display for ParameterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ParameterKind::Boolean => "boolean",
            ParameterKind::Discrete => "discrete",
            ParameterKind::Byte => "byte",
            ParameterKind::Categorical => "categorical",
        };
        f.write_str(name)
    }
}

/// A single admissible parameter value. Byte sizes are stored as exact
/// integers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Text(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Text(s) => write!(f, "{s:?}"),
        }
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParameterDoc")]
pub struct ParameterSpec {
    name: String,
    kind: ParameterKind,
    values: Vec<Value>,
    default: Value,
    enabled: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    render: Option<RenderRule>,
}

impl ParameterSpec {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ParameterKind {
        self.kind
    }

    pub fn values(&self) -> &[Value] {
        &self.values
    }

    pub fn default_value(&self) -> &Value {
        &self.default
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn render_rule(&self) -> Option<&RenderRule> {
        self.render.as_ref()
    }

    pub fn position_of(&self, value: &Value) -> Option<usize> {
        self.values.iter().position(|v| v == value)
    }

    pub fn default_position(&self) -> usize {
        self.position_of(&self.default)
            .expect("validated: default is admissible")
    }

    /// Number of digits this parameter contributes to the grid.
    pub fn radix(&self) -> u64 {
        if self.enabled {
            self.values.len() as u64
        } else {
            1
        }
    }

    /// Interprets a JSON value (or its string form, as found in map keys)
    /// as a value of this parameter's kind. Does not check admissibility.
    pub fn parse_value(&self, raw: &serde_json::Value) -> Result<Value, SpaceError> {
        parse_kind_value(self.kind, raw).map_err(|message| SpaceError::InvalidValue {
            parameter: self.name.clone(),
            message,
        })
    }

    /// Like [`parse_value`](Self::parse_value) but also requires the value to
    /// be one of the declared values.
    pub fn parse_admissible(&self, raw: &serde_json::Value) -> Result<Value, SpaceError> {
        let value = self.parse_value(raw)?;
        if self.position_of(&value).is_none() {
            return Err(SpaceError::NotAdmissible {
                parameter: self.name.clone(),
                value: value.to_string(),
            });
        }
        Ok(value)
    }
}

fn parse_kind_value(kind: ParameterKind, raw: &serde_json::Value) -> Result<Value, String> {
    use serde_json::Value as J;
    match (kind, raw) {
        (ParameterKind::Boolean, J::Bool(b)) => Ok(Value::Bool(*b)),
        (ParameterKind::Boolean, J::String(s)) => match s.as_str() {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            _ => Err(format!("expected boolean, got {s:?}")),
        },
        (ParameterKind::Discrete, J::Number(n)) => n
            .as_i64()
            .map(Value::Int)
            .ok_or_else(|| format!("expected integer, got {n}")),
        (ParameterKind::Discrete, J::String(s)) => s
            .trim()
            .parse::<i64>()
            .map(Value::Int)
            .map_err(|_| format!("expected integer, got {s:?}")),
        (ParameterKind::Byte, J::Number(n)) => match n.as_i64() {
            Some(v) if v > 0 => Ok(Value::Int(v)),
            _ => Err(format!("byte values must be positive integers, got {n}")),
        },
        (ParameterKind::Byte, J::String(s)) => {
            let bytes = parse_byte_size(s).map_err(|e| e.to_string())?;
            i64::try_from(bytes)
                .map(Value::Int)
                .map_err(|_| format!("byte size {s:?} too large"))
        }
        (ParameterKind::Categorical, J::String(s)) => Ok(Value::Text(s.clone())),
        (kind, other) => Err(format!("expected a {kind} value, got {other}")),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParameterDoc {
    name: String,
    kind: ParameterKind,
    values: Vec<serde_json::Value>,
    default: serde_json::Value,
    #[serde(default = "enabled_by_default")]
    enabled: bool,
    #[serde(default)]
    render: Option<RenderRule>,
}

fn enabled_by_default() -> bool {
    true
}

/// Wire form of a search-space file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceDoc {
    name: String,
    #[serde(default)]
    parameters: Vec<ParameterDoc>,
}

impl TryFrom<ParameterDoc> for ParameterSpec {
    type Error = SpaceError;

    fn try_from(doc: ParameterDoc) -> Result<Self, SpaceError> {
        let invalid = |message: String| SpaceError::InvalidValue {
            parameter: doc.name.clone(),
            message,
        };
        if doc.values.is_empty() {
            return Err(SpaceError::EmptyValues(doc.name));
        }
        let mut values = Vec::with_capacity(doc.values.len());
        for raw in &doc.values {
            let value = parse_kind_value(doc.kind, raw).map_err(invalid)?;
            if values.contains(&value) {
                return Err(SpaceError::DuplicateValue {
                    parameter: doc.name.clone(),
                    value: value.to_string(),
                });
            }
            values.push(value);
        }
        if doc.kind == ParameterKind::Boolean
            && values != [Value::Bool(false), Value::Bool(true)]
        {
            return Err(SpaceError::BooleanValues(doc.name));
        }
        let default = parse_kind_value(doc.kind, &doc.default).map_err(invalid)?;
        if !values.contains(&default) {
            return Err(SpaceError::DefaultNotInValues {
                parameter: doc.name.clone(),
                default: default.to_string(),
            });
        }
        if let Some(rule) = &doc.render {
            rule.validate(doc.kind).map_err(|message| SpaceError::Render {
                parameter: doc.name.clone(),
                message,
            })?;
        }
        Ok(ParameterSpec {
            name: doc.name,
            kind: doc.kind,
            values,
            default,
            enabled: doc.enabled,
            render: doc.render,
        })
    }
}

/// One complete assignment of a value to every parameter of a space, in
/// declaration order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration(IndexMap<String, Value>);

impl Configuration {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.0.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: impl Into<Value>) {
        self.0.insert(name.into(), value.into());
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<K: Into<String>, V: Into<Value>> FromIterator<(K, V)> for Configuration {
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        Configuration(iter.into_iter().map(|(k, v)| (k.into(), v.into())).collect())
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (name, value)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{name}: {value}")?;
        }
        f.write_str("}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpaceDoc")]
pub struct SearchSpace {
    name: String,
    parameters: Vec<ParameterSpec>,
}

impl TryFrom<SpaceDoc> for SearchSpace {
    type Error = SpaceError;

    fn try_from(doc: SpaceDoc) -> Result<Self, SpaceError> {
        let mut parameters: Vec<ParameterSpec> = Vec::with_capacity(doc.parameters.len());
        for p in doc.parameters {
            if parameters.iter().any(|q| q.name == p.name) {
                return Err(SpaceError::DuplicateName(p.name));
            }
            parameters.push(p.try_into()?);
        }
        let space = SearchSpace {
            name: doc.name,
            parameters,
        };
        space.checked_cardinality()?;
        Ok(space)
    }
}

/// Parses and validates a search-space JSON document.
pub fn parse_space(document: &str) -> Result<SearchSpace, SpaceError> {
    let doc: SpaceDoc =
        serde_json::from_str(document).map_err(|e| SpaceError::Document(e.to_string()))?;
    SearchSpace::try_from(doc)
}

impl SearchSpace {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn parameters(&self) -> &[ParameterSpec] {
        &self.parameters
    }

    pub fn parameter(&self, name: &str) -> Option<&ParameterSpec> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.parameters.iter().position(|p| p.name == name)
    }

    fn checked_cardinality(&self) -> Result<u64, SpaceError> {
        self.parameters
            .iter()
            .try_fold(1u64, |acc, p| acc.checked_mul(p.radix()))
            .ok_or(SpaceError::TooLarge)
    }

    /// Product of `|values|` over enabled parameters; 1 when none are enabled.
    pub fn cardinality(&self) -> u64 {
        self.checked_cardinality()
            .expect("validated at construction")
    }

    /// Returns a copy with one parameter's `enabled` flag changed.
    pub fn with_enabled(&self, name: &str, enabled: bool) -> Result<SearchSpace, SpaceError> {
        let mut space = self.clone();
        let pos = space
            .position(name)
            .ok_or_else(|| SpaceError::UnknownParameter(name.to_string()))?;
        space.parameters[pos].enabled = enabled;
        space.checked_cardinality()?;
        Ok(space)
    }

    /// The all-default ("non-optimized") configuration.
    pub fn default_configuration(&self) -> Configuration {
        self.parameters
            .iter()
            .map(|p| (p.name.clone(), p.default.clone()))
            .collect()
    }

    /// Per-parameter value positions for a grid index, in declaration order.
    pub fn index_to_positions(&self, index: u64) -> Result<Vec<usize>, SpaceError> {
        let cardinality = self.cardinality();
        if index >= cardinality {
            return Err(SpaceError::IndexOutOfRange { index, cardinality });
        }
        let mut positions = vec![0; self.parameters.len()];
        let mut rest = index;
        for (slot, p) in positions.iter_mut().zip(&self.parameters).rev() {
            if p.enabled {
                let radix = p.values.len() as u64;
                *slot = (rest % radix) as usize;
                rest /= radix;
            } else {
                *slot = p.default_position();
            }
        }
        Ok(positions)
    }

    pub fn index_to_config(&self, index: u64) -> Result<Configuration, SpaceError> {
        let positions = self.index_to_positions(index)?;
        Ok(self
            .parameters
            .iter()
            .zip(positions)
            .map(|(p, pos)| (p.name.clone(), p.values[pos].clone()))
            .collect())
    }

    /// Per-parameter value positions of a configuration, validating it.
    pub fn config_positions(&self, config: &Configuration) -> Result<Vec<usize>, SpaceError> {
        if let Some((name, _)) = config.iter().find(|(n, _)| self.parameter(n).is_none()) {
            return Err(SpaceError::UnknownParameter(name.to_string()));
        }
        self.parameters
            .iter()
            .map(|p| {
                let value = config
                    .get(&p.name)
                    .ok_or_else(|| SpaceError::MissingParameter(p.name.clone()))?;
                let pos = p.position_of(value).ok_or_else(|| SpaceError::NotAdmissible {
                    parameter: p.name.clone(),
                    value: value.to_string(),
                })?;
                if !p.enabled && *value != p.default {
                    return Err(SpaceError::DisabledNotDefault {
                        parameter: p.name.clone(),
                        value: value.to_string(),
                    });
                }
                Ok(pos)
            })
            .collect()
    }

    pub fn validate_config(&self, config: &Configuration) -> Result<(), SpaceError> {
        self.config_positions(config).map(|_| ())
    }

    pub fn config_to_index(&self, config: &Configuration) -> Result<u64, SpaceError> {
        let positions = self.config_positions(config)?;
        Ok(self
            .parameters
            .iter()
            .zip(positions)
            .filter(|(p, _)| p.enabled)
            .fold(0u64, |acc, (p, pos)| acc * p.values.len() as u64 + pos as u64))
    }

    /// Renders a configuration into runtime flags, container flags and
    /// environment variables, in declaration order.
    pub fn render(&self, config: &Configuration) -> Result<RenderedConfig, SpaceError> {
        let positions = self.config_positions(config)?;
        let mut out = RenderedConfig::default();
        for (p, pos) in self.parameters.iter().zip(positions) {
            if let Some(rule) = &p.render {
                rule.apply(p.kind, &p.values[pos], &mut out);
            }
        }
        Ok(out)
    }
}
