//! Focal loss for the binary accident head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalLossConfig {
    /// Weight of the accident class; the other class gets `1 - alpha`.
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        FocalLossConfig { alpha: 0.25, gamma: 2.0 }
    }
}

impl FocalLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("loss.alpha must be in (0, 1), got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("loss.gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }

    pub fn alpha_t(&self, label: u8) -> f64 {
        if label == 1 {
            self.alpha
        } else {
            1.0 - self.alpha
        }
    }
}

/// Scalar focal loss node for two-class `logits`.
pub fn focal_loss(tape: &mut Tape, logits: Var, label: u8, cfg: &FocalLossConfig) -> Result<Var> {
    if label > 1 {
        return Err(Error::invalid("focal_loss", format!("label must be 0 or 1, got {label}")));
    }
    tape.focal_loss(logits, label as usize, cfg.alpha_t(label), cfg.gamma)
}

/// `-alpha_t (1 - p)^gamma ln p` evaluated directly.
pub fn focal_loss_value(p: f64, alpha_t: f64, gamma: f64) -> f64 {
    let p = p.max(1e-12);
    -alpha_t * (1.0 - p).powf(gamma) * p.ln()
}
