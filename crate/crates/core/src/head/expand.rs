//! Sub-center sampling via the reparameterization trick.
//!
//! One noise draw per training step, shared by every sample in the batch:
//! sub-center `k` of class `c` is `w_c + sigma_c ⊙ eps_{c,k}` with
//! `eps ~ N(0, I)`. The noise is retained so the backward pass can route
//! sub-center gradients into `w` and `log_sigma`.

use crate::numerics::{Mat, RngStream};
use crate::{Error, Result};

use super::{slot_index, HeadConfig, HeadParams, Slot};

/// The `d x C(K+1)` training-time weight matrix plus the noise that built it.
///
/// Main columns are bit-exact copies of the corresponding `W` columns; sub
/// columns are `w_c + sigma_c ⊙ eps_{c,k}` with `eps` column `c*K + (k-1)`.
#[derive(Clone, Debug)]
pub struct ExpandedWeights {
    wm: Mat,
    eps: Mat,
    classes: usize,
    subs: usize,
}

impl ExpandedWeights {
    /// Rebuild the expansion from explicit noise. This is the deterministic
    /// path used by gradient checks (noise frozen across perturbations); the
    /// all-zeros noise matrix makes every sub-center equal its class center.
    pub fn with_noise(params: &HeadParams, cfg: &HeadConfig, eps: Mat) -> Result<Self> {
        cfg.validate()?;
        params.matches_config(cfg)?;
        let (d, c, k) = (cfg.feature_dim, cfg.num_classes, cfg.sub_centers);
        if eps.rows() != d || eps.cols() != c * k {
            return Err(Error::InvalidDimensions(format!(
                "noise matrix is {}x{}, expected {}x{}",
                eps.rows(),
                eps.cols(),
                d,
                c * k
            )));
        }
        let sigma = params.sigma();
        let mut wm = Mat::zeros(d, cfg.total_slots());
        for class in 0..c {
            let w_col = params.w.col(class);
            wm.set_col(slot_index(class, Slot::Main, c, k)?, &w_col);
            for j in 1..=k {
                let eps_col = eps.col(class * k + (j - 1));
                let sub: Vec<f64> = (0..d)
                    .map(|row| w_col[row] + sigma.at(row, class) * eps_col[row])
                    .collect();
                wm.set_col(slot_index(class, Slot::Sub(j), c, k)?, &sub);
            }
        }
        Ok(Self {
            wm,
            eps,
            classes: c,
            subs: k,
        })
    }

    pub fn weights(&self) -> &Mat {
        &self.wm
    }

    pub fn noise(&self) -> &Mat {
        &self.eps
    }

    pub fn total_slots(&self) -> usize {
        self.wm.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn sub_centers(&self) -> usize {
        self.subs
    }

    /// Checks that this expansion was built from exactly these parameters.
    /// The backward pass calls this to reject a draw made before the last
    /// optimizer update: every main column must equal its `W` column and
    /// every sub column must reproduce under the stored noise, bit for bit.
    pub fn verify_fresh(&self, params: &HeadParams, cfg: &HeadConfig) -> Result<()> {
        params.matches_config(cfg)?;
        let (d, c, k) = (cfg.feature_dim, cfg.num_classes, cfg.sub_centers);
        if self.wm.rows() != d || self.wm.cols() != cfg.total_slots() {
            return Err(Error::StaleExpansion(format!(
                "expanded matrix is {}x{}, expected {}x{}",
                self.wm.rows(),
                self.wm.cols(),
                d,
                cfg.total_slots()
            )));
        }
        if self.eps.rows() != d || self.eps.cols() != c * k {
            return Err(Error::StaleExpansion(format!(
                "noise matrix is {}x{}, expected {}x{}",
                self.eps.rows(),
                self.eps.cols(),
                d,
                c * k
            )));
        }
        let sigma = params.sigma();
        for class in 0..c {
            let main = slot_index(class, Slot::Main, c, k)?;
            for row in 0..d {
                if self.wm.at(row, main).to_bits() != params.w.at(row, class).to_bits() {
                    return Err(Error::StaleExpansion(format!(
                        "main column of class {class} does not match W (row {row}); \
                         re-sample after updating parameters"
                    )));
                }
            }
            for j in 1..=k {
                let slot = slot_index(class, Slot::Sub(j), c, k)?;
                for row in 0..d {
                    let expect = params.w.at(row, class)
                        + sigma.at(row, class) * self.eps.at(row, class * k + (j - 1));
                    if self.wm.at(row, slot).to_bits() != expect.to_bits() {
                        return Err(Error::StaleExpansion(format!(
                            "sub-center {j} of class {class} does not reproduce from \
                             the stored noise (row {row}); re-sample after updating parameters"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Draw one fresh noise matrix and expand. Call once per training step; the
/// draw is shared by every sample in the batch and re-sampled on the next
/// forward pass.
pub fn sample_sub_centers(
    params: &HeadParams,
    cfg: &HeadConfig,
    rng: &mut RngStream,
) -> Result<ExpandedWeights> {
    let eps = rng.standard_normal_mat(cfg.feature_dim, cfg.num_classes * cfg.sub_centers);
    ExpandedWeights::with_noise(params, cfg, eps)
}
