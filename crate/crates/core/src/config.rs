use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the winding linear system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindingConfig {
    /// Kernel width `w`; pairs closer than this use the clamped kernel.
    pub width: f64,
    /// Tikhonov weight on the diagonal regularizer.
    pub alpha: f64,
    /// Weight of the bounding-box constraints (enters the objective as `eta / 2`).
    pub eta: f64,
    /// Half side length of the constraint box `[-h, h]^dim`.
    pub box_half_extent: f64,
    /// Number of box samples; `None` means twice the number of points.
    pub box_sample_count: Option<usize>,
    pub seed: u64,
}

impl Default for WindingConfig {
    fn default() -> Self {
        Self {
            width: 0.04,
            alpha: 0.5,
            eta: 50.0,
            box_half_extent: 0.7,
            box_sample_count: None,
            seed: 0,
        }
    }
}

impl WindingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::InvalidParameter(format!("width must be > 0, got {}", self.width)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidParameter(format!("eta must be >= 0, got {}", self.eta)));
        }
        if !(self.box_half_extent > 0.0 && self.box_half_extent.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "box half extent must be > 0, got {}",
                self.box_half_extent
            )));
        }
        Ok(())
    }

    /// Box sample count for a cloud of `n` points.
    pub fn box_count(&self, n: usize) -> usize {
        self.box_sample_count.unwrap_or(2 * n)
    }
}
