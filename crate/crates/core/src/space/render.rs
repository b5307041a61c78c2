use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{format_byte_size, ParameterKind, Value};

const PLACEHOLDER: &str = "{value}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenderTarget {
    RuntimeFlag,
    ContainerFlag,
    /// Template text is `NAME=...`; the variable name is everything before
    /// the first `=`.
    EnvironmentVariable,
}

/// How a parameter value turns into command-line or environment text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RenderRule {
    Template {
        target: RenderTarget,
        template: String,
    },
    /// Boolean parameters pick one of two fixed strings; empty emits nothing.
    Toggle {
        target: RenderTarget,
        #[serde(default)]
        on_template: String,
        #[serde(default)]
        off_template: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedConfig {
    pub runtime_flags: Vec<String>,
    pub container_flags: Vec<String>,
    pub environment: BTreeMap<String, String>,
}

impl RenderRule {
    pub fn target(&self) -> RenderTarget {
        match self {
            RenderRule::Template { target, .. } | RenderRule::Toggle { target, .. } => *target,
        }
    }

    pub(super) fn validate(&self, kind: ParameterKind) -> Result<(), String> {
        let templates: Vec<&str> = match (kind, self) {
            (ParameterKind::Boolean, RenderRule::Toggle { on_template, off_template, .. }) => {
                vec![on_template, off_template]
            }
            (ParameterKind::Boolean, RenderRule::Template { .. }) => {
                return Err("boolean parameters use on_template/off_template".into())
            }
            (_, RenderRule::Template { template, .. }) => {
                let count = template.matches(PLACEHOLDER).count();
                if count != 1 {
                    return Err(format!(
                        "template {template:?} must contain {PLACEHOLDER} exactly once (found {count})"
                    ));
                }
                vec![template]
            }
            (_, RenderRule::Toggle { .. }) => {
                return Err("only boolean parameters may use on_template/off_template".into())
            }
        };
        if self.target() == RenderTarget::EnvironmentVariable {
            for t in templates.into_iter().filter(|t| !t.is_empty()) {
                match t.split_once('=') {
                    Some((name, _)) if !name.is_empty() && !name.contains(PLACEHOLDER) => {}
                    _ => return Err(format!("environment template {t:?} must start with NAME=")),
                }
            }
        }
        Ok(())
    }

    pub(super) fn apply(&self, kind: ParameterKind, value: &Value, out: &mut RenderedConfig) {
        let text = match self {
            RenderRule::Toggle { on_template, off_template, .. } => {
                if matches!(value, Value::Bool(true)) {
                    on_template.clone()
                } else {
                    off_template.clone()
                }
            }
            RenderRule::Template { template, .. } => {
                template.replacen(PLACEHOLDER, &render_value(kind, value), 1)
            }
        };
        if text.is_empty() {
            return;
        }
        match self.target() {
            RenderTarget::RuntimeFlag => out.runtime_flags.push(text),
            RenderTarget::ContainerFlag => out.container_flags.push(text),
            RenderTarget::EnvironmentVariable => {
                let (name, val) = text.split_once('=').expect("validated: NAME=...");
                out.environment.insert(name.to_string(), val.to_string());
            }
        }
    }
}

fn render_value(kind: ParameterKind, value: &Value) -> String {
    match (kind, value) {
        (ParameterKind::Byte, Value::Int(bytes)) if *bytes > 0 => {
            format_byte_size(*bytes as u64).expect("positive")
        }
        (_, Value::Int(i)) => i.to_string(),
        (_, Value::Bool(b)) => b.to_string(),
        (_, Value::Text(s)) => s.clone(),
    }
}
