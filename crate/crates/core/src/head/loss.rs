//! Classification and spread losses.
//!
//! The classification term is cross-entropy between the row-softmax of the
//! expanded logits and the multi-center soft label. The spread term keeps
//! per-dimension sigmas near one; it is summed over dimensions and averaged
//! over classes, with no batch-size scaling.

use crate::numerics::Mat;
use crate::{Error, Result};

use super::{HeadParams, SoftLabel};

/// Probabilities below this are clamped before taking a log.
const LOG_FLOOR: f64 = 1e-300;

/// Row-wise softmax with max subtraction. Rejects non-finite logits so a
/// diverging run fails loudly instead of producing NaN probabilities.
pub fn softmax(logits: &Mat) -> Result<Mat> {
    if let Some(index) = logits.first_non_finite() {
        return Err(Error::NonFinite {
            what: "softmax input".into(),
            index,
        });
    }
    let mut out = Mat::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &z) in row.iter().enumerate() {
            let e = (z - max).exp();
            out[(i, j)] = e;
            sum += e;
        }
        for j in 0..logits.cols() {
            out[(i, j)] /= sum;
        }
    }
    Ok(out)
}

/// Mean cross-entropy between probability rows and soft labels. The log is
/// taken on `max(p, 1e-300)` so an underflowed slot with zero label mass
/// contributes exactly zero instead of NaN.
pub fn ce_loss(probs: &Mat, labels: &[SoftLabel]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::InvalidDimensions(format!(
            "{} probability rows for {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    if probs.rows() == 0 {
        return Err(Error::InvalidDimensions(
            "cross-entropy over an empty batch".into(),
        ));
    }
    let mut total = 0.0;
    for (i, label) in labels.iter().enumerate() {
        if label.len() != probs.cols() {
            return Err(Error::InvalidDimensions(format!(
                "label {} has {} slots, probabilities have {}",
                i,
                label.len(),
                probs.cols()
            )));
        }
        let mut li = 0.0;
        for (j, &tau) in label.probs().iter().enumerate() {
            li -= tau * probs.at(i, j).max(LOG_FLOOR).ln();
        }
        total += li;
    }
    Ok(total / probs.rows() as f64)
}

/// Spread regularizer: `(1/C) * sum_c sum_d -0.5 * (1 + 2L - e^{2L})` with
/// `L = log sigma`. Zero exactly when every sigma is one, positive otherwise.
pub fn sigma_loss(params: &HeadParams) -> f64 {
    let c = params.num_classes() as f64;
    let mut total = 0.0;
    for class in 0..params.num_classes() {
        for row in 0..params.feature_dim() {
            let l = params.log_sigma.at(row, class);
            total += -0.5 * (1.0 + 2.0 * l - (2.0 * l).exp());
        }
    }
    total / c
}

/// Gradient of [`sigma_loss`] with respect to `log_sigma`: `(sigma^2 - 1) / C`
/// per entry. The unscaled `sigma^2 - 1` is the per-class derivative before
/// the class average.
pub fn sigma_loss_grad(params: &HeadParams) -> Mat {
    let c = params.num_classes() as f64;
    params.log_sigma.map(|l| ((2.0 * l).exp() - 1.0) / c)
}

/// The two loss terms and their weighted sum for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    /// Classification term (mean soft-label cross-entropy).
    pub l_m: f64,
    /// Spread term, unweighted.
    pub l_sigma: f64,
    /// `l_m + sigma_loss_weight * l_sigma`.
    pub total: f64,
}

/// Combine the classification and spread terms.
pub fn total_loss(l_m: f64, l_sigma: f64, sigma_loss_weight: f64) -> LossBreakdown {
    LossBreakdown {
        l_m,
        l_sigma,
        total: l_m + sigma_loss_weight * l_sigma,
    }
}
