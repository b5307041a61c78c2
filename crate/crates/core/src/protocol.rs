use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid measurement protocol: {0}")]
pub struct ProtocolError(pub String);

/// How each configuration is measured: `requests` requests are issued, the
/// first `warmup` are discarded, and the whole trial must finish within
/// `timeout_s` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementProtocol {
    #[serde(default = "default_requests")]
    pub requests: u32,
    #[serde(default = "default_warmup")]
    pub warmup: u32,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: f64,
}

fn default_requests() -> u32 {
    50
}

fn default_warmup() -> u32 {
    5
}

fn default_timeout_s() -> f64 {
    300.0
}

impl Default for MeasurementProtocol {
    fn default() -> Self {
        MeasurementProtocol {
            requests: default_requests(),
            warmup: default_warmup(),
            timeout_s: default_timeout_s(),
        }
    }
}

impl MeasurementProtocol {
    pub fn new(requests: u32, warmup: u32, timeout_s: f64) -> Result<Self, ProtocolError> {
        let protocol = MeasurementProtocol {
            requests,
            warmup,
            timeout_s,
        };
        protocol.validate()?;
        Ok(protocol)
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.requests <= self.warmup {
            return Err(ProtocolError(format!(
                "requests ({}) must exceed warmup ({})",
                self.requests, self.warmup
            )));
        }
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(ProtocolError(format!(
                "timeout must be positive, got {}",
                self.timeout_s
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let p = MeasurementProtocol::default();
        assert_eq!((p.requests, p.warmup), (50, 5));
        p.validate().unwrap();
        assert!(MeasurementProtocol::new(5, 5, 1.0).is_err());
        assert!(MeasurementProtocol::new(6, 5, 0.0).is_err());
        let parsed: MeasurementProtocol = serde_json::from_str(r#"{"requests": 10}"#).unwrap();
        assert_eq!(parsed.warmup, 5);
    }
}
