//! Label- and logit-space companions the multi-center head composes with:
//! label smoothing over the expanded slots, MixUp label interpolation, and
//! additive-margin softmax on the expanded weight matrix.
//!
//! All three are pure functions. Smoothing treats the multi-center label as
//! the label and spreads mass over all `C(K+1)` slots; the margin treats
//! every slot with positive label mass as a target (sub slots only when
//! `margin_on_subcenters` is set).

use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::head::{HeadConfig, HeadParams, SoftLabel};
use crate::head::{chain_to_params, ExpandedWeights};
use crate::numerics::{Mat, RngStream};
use crate::{Error, Result};

fn default_smoothing_eps() -> f64 {
    0.1
}
fn default_mixup_alpha() -> f64 {
    0.8
}
fn default_am_margin() -> f64 {
    0.35
}
fn default_am_scale() -> f64 {
    30.0
}
fn default_margin_on_subcenters() -> bool {
    true
}

/// Knobs for the three companions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    /// Label-smoothing mass spread over all slots, in `[0, 1)`.
    #[serde(default = "default_smoothing_eps")]
    pub smoothing_eps: f64,
    /// Beta(alpha, alpha) parameter for MixUp's interpolation weight.
    #[serde(default = "default_mixup_alpha")]
    pub mixup_alpha: f64,
    /// Additive cosine margin.
    #[serde(default = "default_am_margin")]
    pub am_margin: f64,
    /// Logit scale applied after the margin.
    #[serde(default = "default_am_scale")]
    pub am_scale: f64,
    /// Whether sub-center slots with label mass also receive the margin.
    #[serde(default = "default_margin_on_subcenters")]
    pub margin_on_subcenters: bool,
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self {
            smoothing_eps: default_smoothing_eps(),
            mixup_alpha: default_mixup_alpha(),
            am_margin: default_am_margin(),
            am_scale: default_am_scale(),
            margin_on_subcenters: default_margin_on_subcenters(),
        }
    }
}

impl VariantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.smoothing_eps) {
            return Err(Error::InvalidConfig(format!(
                "smoothing_eps must be in [0, 1), got {}",
                self.smoothing_eps
            )));
        }
        if !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "mixup_alpha must be positive and finite, got {}",
                self.mixup_alpha
            )));
        }
        if !(self.am_margin >= 0.0 && self.am_margin.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "am_margin must be nonnegative and finite, got {}",
                self.am_margin
            )));
        }
        if !(self.am_scale > 0.0 && self.am_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "am_scale must be positive and finite, got {}",
                self.am_scale
            )));
        }
        Ok(())
    }
}

/// Which companions a training run actually applies, with their knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct ActiveVariants {
    pub config: VariantConfig,
    pub label_smoothing: bool,
    pub mixup: bool,
    pub am_softmax: bool,
}

impl ActiveVariants {
    pub fn none() -> Self {
        Self {
            config: VariantConfig::default(),
            label_smoothing: false,
            mixup: false,
            am_softmax: false,
        }
    }
}

/// `tau' = (1 - eps) * tau + eps / total_slots`, over every expanded slot.
pub fn smooth_label(label: &SoftLabel, eps: f64, total_slots: usize) -> Result<SoftLabel> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidConfig(format!(
            "smoothing eps must be in [0, 1), got {eps}"
        )));
    }
    if total_slots != label.len() {
        return Err(Error::InvalidDimensions(format!(
            "smoothing over {total_slots} slots but the label has {}",
            label.len()
        )));
    }
    let floor = eps / total_slots as f64;
    let probs = label
        .probs()
        .iter()
        .map(|&tau| (1.0 - eps) * tau + floor)
        .collect();
    SoftLabel::from_probs(probs)
}

/// `lambda * a + (1 - lambda) * b`, elementwise.
pub fn mixup_labels(a: &SoftLabel, b: &SoftLabel, lambda: f64) -> Result<SoftLabel> {
    if a.len() != b.len() {
        return Err(Error::InvalidDimensions(format!(
            "mixing labels of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!(
            "mixup lambda must be in [0, 1], got {lambda}"
        )));
    }
    let probs = a
        .probs()
        .iter()
        .zip(b.probs())
        .map(|(&pa, &pb)| lambda * pa + (1.0 - lambda) * pb)
        .collect();
    SoftLabel::from_probs(probs)
}

/// Draw the MixUp interpolation weight from `Beta(alpha, alpha)`.
pub fn sample_mixup_lambda(alpha: f64, rng: &mut RngStream) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| {
        Error::InvalidConfig(format!("mixup_alpha {alpha} rejected: {e}"))
    })?;
    Ok(beta.sample(rng))
}

/// L2-normalized rows of `x`, their norms, normalized columns of the
/// expanded weights, their norms, and the cosine matrix.
struct CosineStats {
    u: Mat,
    x_norms: Vec<f64>,
    wt: Mat,
    w_norms: Vec<f64>,
    cos: Mat,
}

fn cosine_stats(x: &Mat, ew: &ExpandedWeights) -> Result<CosineStats> {
    let wm = ew.weights();
    if x.cols() != wm.rows() {
        return Err(Error::InvalidDimensions(format!(
            "features have {} columns, expanded weights expect {}",
            x.cols(),
            wm.rows()
        )));
    }
    let mut u = x.clone();
    let mut x_norms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let mut sq = 0.0;
        for &v in x.row(i) {
            sq += v * v;
        }
        let norm = sq.sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm {
                what: "feature row",
                index: i,
            });
        }
        for j in 0..x.cols() {
            u[(i, j)] /= norm;
        }
        x_norms.push(norm);
    }
    let mut wt = wm.clone();
    let mut w_norms = Vec::with_capacity(wm.cols());
    for s in 0..wm.cols() {
        let mut sq = 0.0;
        for r in 0..wm.rows() {
            sq += wm.at(r, s) * wm.at(r, s);
        }
        let norm = sq.sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm {
                what: "weight column",
                index: s,
            });
        }
        for r in 0..wm.rows() {
            wt[(r, s)] /= norm;
        }
        w_norms.push(norm);
    }
    let cos = u.matmul(&wt)?;
    Ok(CosineStats {
        u,
        x_norms,
        wt,
        w_norms,
        cos,
    })
}

/// Additive-margin logits on the expanded head:
/// `am_scale * (cos theta - am_margin * target)`, where `target` marks slots
/// carrying positive label mass (sub slots only if `margin_on_subcenters`).
pub fn am_logits(
    x: &Mat,
    ew: &ExpandedWeights,
    labels: &[SoftLabel],
    cfg: &VariantConfig,
) -> Result<Mat> {
    cfg.validate()?;
    if x.rows() != labels.len() {
        return Err(Error::InvalidDimensions(format!(
            "{} feature rows for {} labels",
            x.rows(),
            labels.len()
        )));
    }
    let stats = cosine_stats(x, ew)?;
    let period = ew.sub_centers() + 1;
    let mut z = Mat::zeros(x.rows(), ew.total_slots());
    for i in 0..x.rows() {
        let label = &labels[i];
        if label.len() != ew.total_slots() {
            return Err(Error::InvalidDimensions(format!(
                "label {} has {} slots, head has {}",
                i,
                label.len(),
                ew.total_slots()
            )));
        }
        for s in 0..ew.total_slots() {
            let is_main = s % period == 0;
            let targeted =
                label.probs()[s] > 0.0 && (is_main || cfg.margin_on_subcenters);
            let margin = if targeted { cfg.am_margin } else { 0.0 };
            z[(i, s)] = cfg.am_scale * (stats.cos.at(i, s) - margin);
        }
    }
    Ok(z)
}

/// Backward pass for [`am_logits`]: gradients with respect to the expanded
/// weights and the features, given the gradient of the loss in the logits.
/// The margin term is constant, so the mask does not appear.
pub fn am_backward(
    x: &Mat,
    ew: &ExpandedWeights,
    d_z: &Mat,
    cfg: &VariantConfig,
) -> Result<(Mat, Mat)> {
    cfg.validate()?;
    let stats = cosine_stats(x, ew)?;
    if d_z.rows() != x.rows() || d_z.cols() != ew.total_slots() {
        return Err(Error::InvalidDimensions(format!(
            "logit gradient is {}x{}, expected {}x{}",
            d_z.rows(),
            d_z.cols(),
            x.rows(),
            ew.total_slots()
        )));
    }
    let d = x.cols();
    // d cos / d x_i = (w_tilde - cos * u_i) / |x_i|
    let a = d_z.matmul(&stats.wt.transpose())?;
    let mut d_x = Mat::zeros(x.rows(), d);
    for i in 0..x.rows() {
        let mut row_dot = 0.0;
        for s in 0..d_z.cols() {
            row_dot += d_z.at(i, s) * stats.cos.at(i, s);
        }
        for j in 0..d {
            d_x[(i, j)] =
                cfg.am_scale * (a.at(i, j) - row_dot * stats.u.at(i, j)) / stats.x_norms[i];
        }
    }
    // d cos / d w_s = (u_i - cos * w_tilde_s) / |w_s|
    let p = stats.u.transpose().matmul(d_z)?;
    let mut d_wm = Mat::zeros(d, ew.total_slots());
    for s in 0..ew.total_slots() {
        let mut col_dot = 0.0;
        for i in 0..d_z.rows() {
            col_dot += d_z.at(i, s) * stats.cos.at(i, s);
        }
        for r in 0..d {
            d_wm[(r, s)] =
                cfg.am_scale * (p.at(r, s) - col_dot * stats.wt.at(r, s)) / stats.w_norms[s];
        }
    }
    Ok((d_wm, d_x))
}

/// Fold an expanded-weight gradient from the margin path into compact head
/// gradients, including the weighted spread-regularizer term.
pub fn am_chain_to_params(
    d_wm: &Mat,
    ew: &ExpandedWeights,
    params: &HeadParams,
    head_cfg: &HeadConfig,
) -> Result<(Mat, Mat)> {
    chain_to_params(d_wm, ew, params, head_cfg)
}
