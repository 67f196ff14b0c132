//! The multi-center classifier head.
//!
//! Each class `c` owns a center column `w_c` and a per-dimension log standard
//! deviation `log_sigma_c`. During training, `K` sub-centers per class are
//! sampled as `w_c + sigma_c ⊙ eps` and appended to the weight matrix, so a
//! C-class problem is trained as a C(K+1)-slot problem against a soft label
//! that puts mass `alpha` on the main slot and `(1-alpha)/K` on each sub
//! slot. At test time the sub-centers are discarded and the head is an
//! ordinary linear classifier over `W`.

mod expand;
mod grad;
mod label;
mod loss;

pub use expand::{sample_sub_centers, ExpandedWeights};
pub(crate) use grad::chain_to_params;
pub use grad::{backward, step_loss, GradientSet};
pub use label::{build_label, slot_index, Slot, SoftLabel};
pub use loss::{
    ce_loss, sigma_loss, sigma_loss_grad, softmax, total_loss, LossBreakdown,
};

use serde::{Deserialize, Serialize};

use crate::numerics::{Mat, RngStream};
use crate::{Error, Result};

fn default_sub_centers() -> usize {
    2
}
fn default_main_label_mass() -> f64 {
    0.5
}
fn default_sigma_loss_weight() -> f64 {
    1.0
}
fn default_sigma_init() -> f64 {
    1.0
}

/// Head hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Feature dimensionality `d`.
    pub feature_dim: usize,
    /// Number of classes `C`.
    pub num_classes: usize,
    /// Sub-centers per class `K`. Zero reduces the head to a vanilla linear
    /// classifier (and then `main_label_mass` must be 1).
    #[serde(default = "default_sub_centers")]
    pub sub_centers: usize,
    /// Label mass `alpha` on the main slot; each sub slot gets `(1-alpha)/K`.
    #[serde(default = "default_main_label_mass")]
    pub main_label_mass: f64,
    /// Weight on the standard-deviation regularizer. 1.0 is the plain sum of
    /// the two losses; 0.0 disables the regularizer.
    #[serde(default = "default_sigma_loss_weight")]
    pub sigma_loss_weight: f64,
    /// Initial standard deviation (stored as `ln sigma_init`).
    #[serde(default = "default_sigma_init")]
    pub sigma_init: f64,
}

impl HeadConfig {
    pub fn new(feature_dim: usize, num_classes: usize) -> Self {
        Self {
            feature_dim,
            num_classes,
            sub_centers: default_sub_centers(),
            main_label_mass: default_main_label_mass(),
            sigma_loss_weight: default_sigma_loss_weight(),
            sigma_init: default_sigma_init(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 1 {
            return Err(Error::InvalidConfig("feature_dim must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        if !(self.main_label_mass > 0.0 && self.main_label_mass <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "main_label_mass must be in (0, 1], got {}",
                self.main_label_mass
            )));
        }
        if self.sub_centers == 0 && self.main_label_mass != 1.0 {
            return Err(Error::InvalidConfig(
                "main_label_mass must be 1 when sub_centers is 0".into(),
            ));
        }
        if !(self.sigma_loss_weight >= 0.0 && self.sigma_loss_weight.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sigma_loss_weight must be a finite value >= 0, got {}",
                self.sigma_loss_weight
            )));
        }
        if !(self.sigma_init > 0.0 && self.sigma_init.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sigma_init must be a finite value > 0, got {}",
                self.sigma_init
            )));
        }
        Ok(())
    }

    /// Training-time slot count `C(K+1)`.
    pub fn total_slots(&self) -> usize {
        self.num_classes * (self.sub_centers + 1)
    }

    /// Trainable parameter count of the full head (`W` plus `log_sigma`).
    pub fn param_count(&self) -> usize {
        2 * self.feature_dim * self.num_classes
    }

    /// Parameter count after the test-time collapse (just `W`).
    pub fn collapsed_param_count(&self) -> usize {
        self.feature_dim * self.num_classes
    }
}

/// Learnable head parameters: class centers and per-class log standard
/// deviations, both `d x C` with one class per column.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w: Mat,
    pub log_sigma: Mat,
}

impl HeadParams {
    /// Centers drawn N(0, 1/d) per entry, `log_sigma` constant at
    /// `ln sigma_init`.
    pub fn init(cfg: &HeadConfig, rng: &mut RngStream) -> Self {
        let scale = 1.0 / (cfg.feature_dim as f64).sqrt();
        let w = rng
            .standard_normal_mat(cfg.feature_dim, cfg.num_classes)
            .scale(scale);
        let log_sigma = Mat::zeros(cfg.feature_dim, cfg.num_classes)
            .map(|_| cfg.sigma_init.ln());
        Self { w, log_sigma }
    }

    pub fn from_parts(w: Mat, log_sigma: Mat) -> Result<Self> {
        if w.rows() != log_sigma.rows() || w.cols() != log_sigma.cols() {
            return Err(Error::ShapeMismatch {
                op: "head params",
                left_rows: w.rows(),
                left_cols: w.cols(),
                right_rows: log_sigma.rows(),
                right_cols: log_sigma.cols(),
            });
        }
        Ok(Self { w, log_sigma })
    }

    pub fn feature_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.w.cols()
    }

    /// Elementwise `exp(log_sigma)`.
    pub fn sigma(&self) -> Mat {
        self.log_sigma.map(f64::exp)
    }

    pub fn num_params(&self) -> usize {
        self.w.data().len() + self.log_sigma.data().len()
    }

    /// Mean of `sigma^2` over all entries; the quantity tracked in metrics.
    pub fn mean_sigma_sq(&self) -> f64 {
        let data = self.log_sigma.data();
        if data.is_empty() {
            return 1.0;
        }
        data.iter().map(|&l| (2.0 * l).exp()).sum::<f64>() / data.len() as f64
    }

    fn matches_config(&self, cfg: &HeadConfig) -> Result<()> {
        if self.feature_dim() != cfg.feature_dim || self.num_classes() != cfg.num_classes {
            return Err(Error::InvalidDimensions(format!(
                "head params are {}x{}, config says {}x{}",
                self.feature_dim(),
                self.num_classes(),
                cfg.feature_dim,
                cfg.num_classes
            )));
        }
        Ok(())
    }
}

/// Training-time logits: one dot product per expanded slot, no bias term.
pub fn forward_logits(x_batch: &Mat, ew: &ExpandedWeights) -> Result<Mat> {
    x_batch.matmul(ew.weights())
}

/// Test-time logits against the class centers only. Restricted to the main
/// slots, this agrees with [`forward_logits`] bit-for-bit: the main columns
/// of the expanded matrix are exact copies of `W` and the kernel sums in the
/// same order.
pub fn inference_logits(x_batch: &Mat, params: &HeadParams) -> Result<Mat> {
    x_batch.matmul(&params.w)
}

/// Test-time collapse: keep the class centers, drop `log_sigma`.
pub fn collapse_to_linear(params: &HeadParams) -> Mat {
    params.w.clone()
}
