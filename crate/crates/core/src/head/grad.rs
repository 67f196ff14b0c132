//! Analytic gradients for the expanded head.
//!
//! With `Z = X * Wm`, probabilities `P = softmax(Z)` and soft labels `T`, the
//! batch-mean cross-entropy has `dZ = (P - T) / n`. Expanded-weight gradients
//! fold back into the compact parameters: a class column of `W` collects its
//! main slot plus every sub slot, and `log_sigma` collects the sub slots
//! scaled by the noise that produced them (`sigma ⊙ eps`), plus the weighted
//! gradient of the spread regularizer.

use crate::numerics::Mat;
use crate::{Error, Result};

use super::loss::{sigma_loss, sigma_loss_grad, total_loss, LossBreakdown};
use super::{slot_index, ExpandedWeights, HeadConfig, HeadParams, Slot, SoftLabel};

/// Gradients of the total step loss with respect to the head parameters and
/// the feature batch.
#[derive(Clone, Debug)]
pub struct GradientSet {
    /// `d x C`, gradient for the class centers.
    pub d_w: Mat,
    /// `d x C`, gradient for the log-sigmas.
    pub d_log_sigma: Mat,
    /// `n x d`, gradient for the input features (for backbone chaining).
    pub d_x: Mat,
}

/// Forward pass shared by [`step_loss`] and [`backward`]: expanded logits,
/// their softmax, and the batch-mean cross-entropy computed from the
/// log-sum-exp so both callers see bit-identical losses.
fn forward_stats(
    x: &Mat,
    labels: &[SoftLabel],
    ew: &ExpandedWeights,
) -> Result<(Mat, f64)> {
    if x.rows() != labels.len() {
        return Err(Error::InvalidDimensions(format!(
            "{} feature rows for {} labels",
            x.rows(),
            labels.len()
        )));
    }
    if x.rows() == 0 {
        return Err(Error::InvalidDimensions("empty batch".into()));
    }
    let z = x.matmul(ew.weights())?;
    if let Some(index) = z.first_non_finite() {
        return Err(Error::NonFinite {
            what: "training logits".into(),
            index,
        });
    }
    let slots = z.cols();
    let mut probs = Mat::zeros(z.rows(), slots);
    let mut l_m = 0.0;
    for i in 0..z.rows() {
        let label = &labels[i];
        if label.len() != slots {
            return Err(Error::InvalidDimensions(format!(
                "label {} has {} slots, logits have {}",
                i,
                label.len(),
                slots
            )));
        }
        let row = z.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &zv) in row.iter().enumerate() {
            let e = (zv - max).exp();
            probs[(i, j)] = e;
            sum += e;
        }
        for j in 0..slots {
            probs[(i, j)] /= sum;
        }
        let lse = max + sum.ln();
        let mut dot = 0.0;
        for (j, &tau) in label.probs().iter().enumerate() {
            dot += tau * row[j];
        }
        l_m += lse - dot;
    }
    Ok((probs, l_m / z.rows() as f64))
}

/// Total loss for one step without gradients. The expansion must have been
/// sampled from exactly these parameters.
pub fn step_loss(
    x: &Mat,
    labels: &[SoftLabel],
    ew: &ExpandedWeights,
    params: &HeadParams,
    cfg: &HeadConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    ew.verify_fresh(params, cfg)?;
    let (_, l_m) = forward_stats(x, labels, ew)?;
    Ok(total_loss(l_m, sigma_loss(params), cfg.sigma_loss_weight))
}

/// Fold an expanded-weight gradient into compact-parameter gradients and add
/// the weighted spread-regularizer term. Shared with the margin variant,
/// which produces its own `d_wm` but chains identically.
pub(crate) fn chain_to_params(
    d_wm: &Mat,
    ew: &ExpandedWeights,
    params: &HeadParams,
    cfg: &HeadConfig,
) -> Result<(Mat, Mat)> {
    let (d, c, k) = (cfg.feature_dim, cfg.num_classes, cfg.sub_centers);
    let sigma = params.sigma();
    let mut d_w = Mat::zeros(d, c);
    let mut d_ls = sigma_loss_grad(params).scale(cfg.sigma_loss_weight);
    for class in 0..c {
        let main = slot_index(class, Slot::Main, c, k)?;
        for row in 0..d {
            let mut wg = d_wm.at(row, main);
            let mut lg = 0.0;
            for j in 1..=k {
                let slot = slot_index(class, Slot::Sub(j), c, k)?;
                let g = d_wm.at(row, slot);
                wg += g;
                lg += g * ew.noise().at(row, class * k + (j - 1));
            }
            d_w[(row, class)] = wg;
            d_ls[(row, class)] += lg * sigma.at(row, class);
        }
    }
    Ok((d_w, d_ls))
}

/// One training step's loss and gradients. Rejects an expansion that was not
/// sampled from the given parameters.
pub fn backward(
    x: &Mat,
    labels: &[SoftLabel],
    ew: &ExpandedWeights,
    params: &HeadParams,
    cfg: &HeadConfig,
) -> Result<(LossBreakdown, GradientSet)> {
    cfg.validate()?;
    ew.verify_fresh(params, cfg)?;
    if x.cols() != cfg.feature_dim {
        return Err(Error::InvalidDimensions(format!(
            "features have {} columns, head expects {}",
            x.cols(),
            cfg.feature_dim
        )));
    }
    let (probs, l_m) = forward_stats(x, labels, ew)?;
    let n = x.rows() as f64;
    let mut dz = Mat::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        for (j, &tau) in labels[i].probs().iter().enumerate() {
            dz[(i, j)] = (probs.at(i, j) - tau) / n;
        }
    }
    let d_wm = x.transpose().matmul(&dz)?;
    let d_x = dz.matmul(&ew.weights().transpose())?;
    let (d_w, d_log_sigma) = chain_to_params(&d_wm, ew, params, cfg)?;
    let loss = total_loss(l_m, sigma_loss(params), cfg.sigma_loss_weight);
    Ok((
        loss,
        GradientSet {
            d_w,
            d_log_sigma,
            d_x,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{
        build_label, forward_logits, inference_logits, sample_sub_centers, softmax,
    };
    use crate::numerics::RngStream;

    fn setup(
        d: usize,
        c: usize,
        k: usize,
        n: usize,
        seed: u64,
    ) -> (HeadConfig, HeadParams, ExpandedWeights, Mat, Vec<SoftLabel>) {
        let mut cfg = HeadConfig::new(d, c);
        cfg.sub_centers = k;
        if k == 0 {
            cfg.main_label_mass = 1.0;
        }
        let mut rng = RngStream::from_seed(seed);
        let params = HeadParams::init(&cfg, &mut rng);
        let ew = sample_sub_centers(&params, &cfg, &mut rng).unwrap();
        let x = rng.standard_normal_mat(n, d);
        let labels: Vec<SoftLabel> = (0..n).map(|i| build_label(i % c, &cfg).unwrap()).collect();
        (cfg, params, ew, x, labels)
    }

    #[test]
    fn gradients_vanish_when_labels_equal_predictions() {
        let (cfg, params, ew, x, _) = setup(3, 2, 2, 5, 11);
        let probs = softmax(&forward_logits(&x, &ew).unwrap()).unwrap();
        let labels: Vec<SoftLabel> = (0..x.rows())
            .map(|i| SoftLabel::from_probs(probs.row(i).to_vec()).unwrap())
            .collect();
        let (_, grads) = backward(&x, &labels, &ew, &params, &cfg).unwrap();
        // dZ is zero bit for bit, and sigma starts at one, so every gradient
        // is exactly zero.
        for v in grads.d_w.data() {
            assert_eq!(*v, 0.0);
        }
        for v in grads.d_log_sigma.data() {
            assert_eq!(*v, 0.0);
        }
        for v in grads.d_x.data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn matches_plain_softmax_oracle_when_k_is_zero() {
        // With no sub-centers and all label mass on the main slot this is a
        // vanilla linear classifier; compare against an independent oracle
        // written with plain loops.
        let (cfg, params, ew, x, labels) = setup(4, 3, 0, 6, 21);
        let (loss, grads) = backward(&x, &labels, &ew, &params, &cfg).unwrap();

        let (n, d, c) = (x.rows(), 4, 3);
        let mut z = vec![vec![0.0_f64; c]; n];
        for i in 0..n {
            for j in 0..c {
                let mut acc = 0.0;
                for t in 0..d {
                    acc += x.at(i, t) * params.w.at(t, j);
                }
                z[i][j] = acc;
            }
        }
        let mut p = vec![vec![0.0_f64; c]; n];
        let mut oracle_loss = 0.0;
        for i in 0..n {
            let max = z[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                p[i][j] = (z[i][j] - max).exp();
                sum += p[i][j];
            }
            for j in 0..c {
                p[i][j] /= sum;
            }
            let t = labels[i].argmax();
            oracle_loss -= (z[i][t] - (max + sum.ln())).max(-1e300);
        }
        oracle_loss /= n as f64;
        assert!((loss.l_m - oracle_loss).abs() <= 1e-12, "loss mismatch");

        let mut dw = vec![vec![0.0_f64; c]; d];
        for i in 0..n {
            for j in 0..c {
                let g = (p[i][j] - labels[i].probs()[j]) / n as f64;
                for t in 0..d {
                    dw[t][j] += x.at(i, t) * g;
                }
            }
        }
        for t in 0..d {
            for j in 0..c {
                assert!(
                    (grads.d_w.at(t, j) - dw[t][j]).abs() <= 1e-12,
                    "dW[{t},{j}]: {} vs {}",
                    grads.d_w.at(t, j),
                    dw[t][j]
                );
            }
        }
    }

    fn finite_difference_check(seed: u64) {
        let (cfg, mut params, ew, x, labels) = setup(3, 2, 2, 4, seed);
        let eps_noise = ew.noise().clone();
        let (_, grads) = backward(&x, &labels, &ew, &params, &cfg).unwrap();
        let h = 1e-5;
        let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1e-3);

        let loss_with = |params: &HeadParams, x: &Mat| -> f64 {
            let ew = ExpandedWeights::with_noise(params, &cfg, eps_noise.clone()).unwrap();
            step_loss(x, &labels, &ew, params, &cfg).unwrap().total
        };

        for row in 0..3 {
            for class in 0..2 {
                let orig = params.w.at(row, class);
                params.w[(row, class)] = orig + h;
                let up = loss_with(&params, &x);
                params.w[(row, class)] = orig - h;
                let down = loss_with(&params, &x);
                params.w[(row, class)] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!(
                    rel(grads.d_w.at(row, class), fd) < 5e-4,
                    "dW[{row},{class}]: analytic {} vs fd {}",
                    grads.d_w.at(row, class),
                    fd
                );

                let orig = params.log_sigma.at(row, class);
                params.log_sigma[(row, class)] = orig + h;
                let up = loss_with(&params, &x);
                params.log_sigma[(row, class)] = orig - h;
                let down = loss_with(&params, &x);
                params.log_sigma[(row, class)] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!(
                    rel(grads.d_log_sigma.at(row, class), fd) < 5e-4,
                    "dLogSigma[{row},{class}]: analytic {} vs fd {}",
                    grads.d_log_sigma.at(row, class),
                    fd
                );
            }
        }

        let fresh = ExpandedWeights::with_noise(&params, &cfg, eps_noise.clone()).unwrap();
        let mut xp = x.clone();
        for i in 0..xp.rows() {
            for j in 0..xp.cols() {
                let orig = xp.at(i, j);
                xp[(i, j)] = orig + h;
                let up = step_loss(&xp, &labels, &fresh, &params, &cfg).unwrap().total;
                xp[(i, j)] = orig - h;
                let down = step_loss(&xp, &labels, &fresh, &params, &cfg).unwrap().total;
                xp[(i, j)] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!(
                    rel(grads.d_x.at(i, j), fd) < 5e-4,
                    "dX[{i},{j}]: analytic {} vs fd {}",
                    grads.d_x.at(i, j),
                    fd
                );
            }
        }
    }

    #[test]
    fn finite_differences_agree_with_analytic_gradients() {
        finite_difference_check(31);
        finite_difference_check(32);
    }

    #[test]
    fn log_sigma_gradient_includes_spread_term() {
        // With dZ = 0 (labels equal predictions) only the regularizer is
        // left, so the gradient must be exactly weight * (sigma^2 - 1) / C.
        let mut cfg = HeadConfig::new(2, 2);
        cfg.sub_centers = 1;
        cfg.sigma_loss_weight = 0.7;
        cfg.sigma_init = 1.5;
        let mut rng = RngStream::from_seed(5);
        let params = HeadParams::init(&cfg, &mut rng);
        let ew = sample_sub_centers(&params, &cfg, &mut rng).unwrap();
        let x = rng.standard_normal_mat(3, 2);
        let probs = softmax(&forward_logits(&x, &ew).unwrap()).unwrap();
        let labels: Vec<SoftLabel> = (0..3)
            .map(|i| SoftLabel::from_probs(probs.row(i).to_vec()).unwrap())
            .collect();
        let (_, grads) = backward(&x, &labels, &ew, &params, &cfg).unwrap();
        let expect = 0.7 * (1.5_f64.powi(2) - 1.0) / 2.0;
        for v in grads.d_log_sigma.data() {
            assert!((*v - expect).abs() < 1e-15, "{v} vs {expect}");
        }
    }

    #[test]
    fn stale_expansion_is_rejected() {
        let (cfg, mut params, ew, x, labels) = setup(3, 2, 2, 4, 41);
        params.w[(0, 0)] += 1e-6;
        assert!(matches!(
            backward(&x, &labels, &ew, &params, &cfg),
            Err(Error::StaleExpansion(_))
        ));
        assert!(matches!(
            step_loss(&x, &labels, &ew, &params, &cfg),
            Err(Error::StaleExpansion(_))
        ));
    }

    #[test]
    fn main_slots_of_training_logits_equal_inference_logits() {
        let (_cfg, params, ew, x, _) = setup(5, 4, 3, 7, 51);
        let train = forward_logits(&x, &ew).unwrap();
        let infer = inference_logits(&x, &params).unwrap();
        for i in 0..x.rows() {
            for class in 0..4 {
                let main = slot_index(class, Slot::Main, 4, 3).unwrap();
                assert_eq!(
                    train.at(i, main).to_bits(),
                    infer.at(i, class).to_bits(),
                    "row {i} class {class}"
                );
            }
        }
    }

    #[test]
    fn batch_mean_scaling() {
        // Duplicating every row must leave loss and parameter gradients
        // unchanged under the batch mean.
        let (cfg, params, ew, x, labels) = setup(3, 2, 2, 4, 61);
        let (l1, g1) = backward(&x, &labels, &ew, &params, &cfg).unwrap();
        let doubled_rows: Vec<usize> = (0..x.rows()).chain(0..x.rows()).collect();
        let x2 = x.select_rows(&doubled_rows);
        let mut labels2 = labels.clone();
        labels2.extend(labels.iter().cloned());
        let (l2, g2) = backward(&x2, &labels2, &ew, &params, &cfg).unwrap();
        assert!((l1.total - l2.total).abs() < 1e-15);
        assert!(g1.d_w.max_abs_diff(&g2.d_w) < 1e-15);
        assert!(g1.d_log_sigma.max_abs_diff(&g2.d_log_sigma) < 1e-15);
    }
}
