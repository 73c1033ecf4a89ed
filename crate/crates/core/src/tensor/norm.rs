use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance floor inside the batch-norm denominator.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl NormState {
    pub fn new(features: usize) -> Self {
        NormState { running_mean: vec![0.0; features], running_var: vec![1.0; features], momentum: 0.1 }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Invalid(format!("norm momentum {} outside (0,1)", self.momentum)));
        }
        if self.running_var.len() != self.running_mean.len() {
            return Err(Error::Invalid("norm state length mismatch".into()));
        }
        if self.running_var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Invalid("running variance must be strictly positive".into()));
        }
        Ok(())
    }

    /// Momentum update with the batch mean and unbiased batch variance.
    pub(crate) fn updated(&self, mean: &[f64], unbiased_var: &[f64]) -> NormState {
        let m = self.momentum;
        NormState {
            running_mean: self.running_mean.iter().zip(mean).map(|(r, b)| (1.0 - m) * r + m * b).collect(),
            running_var: self.running_var.iter().zip(unbiased_var).map(|(r, b)| (1.0 - m) * r + m * b).collect(),
            momentum: m,
        }
    }
}
