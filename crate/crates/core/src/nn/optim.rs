use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{Gradients, Parameterized};

/// Plain mini-batch SGD, no momentum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 16,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `p ← p − lr·g` for every parameter that has a gradient.
pub fn sgd_step<P: Parameterized + ?Sized>(params: &mut P, grads: &Gradients, cfg: &SgdConfig) -> Result<()> {
    for (key, p) in params.params_mut() {
        let Some(g) = grads.get(&key) else { continue };
        if g.shape() != p.shape() {
            return Err(crate::error::Error::shape(format!("gradient of {key}"), p.shape(), g.shape()));
        }
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= cfg.learning_rate * d;
        }
    }
    Ok(())
}
