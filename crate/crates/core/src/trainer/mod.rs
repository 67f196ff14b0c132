//! The optimization loop: AdamW under a cosine schedule with linear warmup,
//! a fresh sub-center draw every step, optional label smoothing, MixUp, and
//! additive-margin logits, and evaluation with the collapsed head.
//!
//! Everything is deterministic in the config seed: five fixed RNG substreams
//! cover head init, backbone init, shuffling, sub-center noise, and MixUp.

mod optim;

pub use optim::{adamw_step, ModelGrads, OptimizerState};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{self, MlpParams, MlpSpec};
use crate::checkpoint::{self, Checkpoint};
use crate::data::Dataset;
use crate::head::{
    backward, build_label, ce_loss, collapse_to_linear, sample_sub_centers, sigma_loss, softmax,
    total_loss, HeadConfig, HeadParams, SoftLabel,
};
use crate::numerics::{Mat, RngStream};
use crate::variants::{
    am_backward, am_chain_to_params, am_logits, mixup_labels, sample_mixup_lambda, smooth_label,
    ActiveVariants,
};
use crate::{Error, Result};

const STREAM_HEAD_INIT: u64 = 0;
const STREAM_BACKBONE_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_SUBCENTER: u64 = 3;
const STREAM_MIXUP: u64 = 4;

fn default_epochs() -> usize {
    100
}
fn default_batch_size() -> usize {
    128
}
fn default_peak_lr() -> f64 {
    1e-3
}
fn default_min_lr() -> f64 {
    1e-5
}
fn default_warmup_epochs() -> usize {
    10
}
fn default_weight_decay() -> f64 {
    0.05
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_seed() -> u64 {
    0
}
fn default_eval_every() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_min_lr")]
    pub min_lr: f64,
    /// Length of the linear ramp, in epochs.
    #[serde(default = "default_warmup_epochs")]
    pub warmup_epochs: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Evaluate the collapsed head every this many epochs.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            peak_lr: default_peak_lr(),
            min_lr: default_min_lr(),
            warmup_epochs: default_warmup_epochs(),
            weight_decay: default_weight_decay(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            seed: default_seed(),
            eval_every: default_eval_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidConfig(format!(
                "epochs, batch_size, and eval_every must be at least 1: {self:?}"
            )));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::InvalidConfig(format!(
                "warmup_epochs {} must be less than epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        for (name, v) in [("peak_lr", self.peak_lr), ("min_lr", self.min_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.min_lr > self.peak_lr {
            return Err(Error::InvalidConfig(format!(
                "min_lr {} exceeds peak_lr {}",
                self.min_lr, self.peak_lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be non-negative and finite, got {}",
                self.weight_decay
            )));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie strictly inside (0, 1), got {b}"
                )));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "adam_eps must be positive and finite, got {}",
                self.adam_eps
            )));
        }
        Ok(())
    }
}

/// Learning rate at a global step: linear ramp from zero to `peak_lr` over
/// the warmup steps, then cosine decay down to `min_lr` at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warmup = total_steps * cfg.warmup_epochs / cfg.epochs;
    if step <= warmup && warmup > 0 {
        return cfg.peak_lr * step as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return cfg.peak_lr;
    }
    let progress = ((step - warmup) as f64 / (total_steps - warmup) as f64).clamp(0.0, 1.0);
    cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One epoch's telemetry. Losses are means over the epoch's steps;
/// accuracies are from the most recent collapsed-head evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Optimizer steps completed so far.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub l_m: f64,
    pub l_sigma: f64,
    pub total: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub mean_sigma_sq: f64,
}

/// Top-1 accuracy of the collapsed linear head (optionally behind a
/// backbone). Ties go to the lowest class index; sigmas never enter.
pub fn evaluate(w: &Mat, backbone: Option<&MlpParams>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidDimensions(
            "cannot evaluate an empty dataset".into(),
        ));
    }
    data.check_labels(w.cols())?;
    let logits = match backbone {
        Some(mlp) => backbone::forward_features(&data.features, mlp)?.matmul(w)?,
        None => data.features.matmul(w)?,
    };
    let mut correct = 0usize;
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let mut best = 0usize;
        for (j, &z) in row.iter().enumerate() {
            if z > row[best] {
                best = j;
            }
        }
        if best == data.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / logits.rows() as f64)
}

/// Everything one training run needs.
#[derive(Clone, Debug)]
pub struct TrainJob<'a> {
    pub head_cfg: HeadConfig,
    pub backbone: Option<MlpSpec>,
    pub train_data: &'a Dataset,
    pub test_data: &'a Dataset,
    pub config: TrainConfig,
    pub variants: Option<ActiveVariants>,
    /// Where to drop `last_good.ckpt` if the loss goes non-finite.
    pub abort_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub head: HeadParams,
    pub backbone: Option<MlpParams>,
    pub metrics: Vec<MetricsRecord>,
}

fn mix_rows(x: &Mat, perm: &[usize], lambda: f64) -> Mat {
    let mut out = Mat::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let partner = x.row(perm[i]);
        for (j, &v) in x.row(i).iter().enumerate() {
            out[(i, j)] = lambda * v + (1.0 - lambda) * partner[j];
        }
    }
    out
}

fn write_last_good(
    dir: &Path,
    head: &HeadParams,
    cfg: &HeadConfig,
    backbone: Option<&MlpParams>,
) -> Option<PathBuf> {
    let path = dir.join("last_good.ckpt");
    let ckpt = Checkpoint::from_training_state(head, cfg, backbone);
    checkpoint::save(&path, &ckpt).ok().map(|()| path)
}

struct StepResult {
    l_m: f64,
    l_sigma: f64,
    total: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_step(
    job: &TrainJob,
    head: &mut HeadParams,
    backbone: &mut Option<MlpParams>,
    opt: &mut OptimizerState,
    lr: f64,
    batch_idx: &[usize],
    eps_rng: &mut RngStream,
    mixup_rng: &mut RngStream,
) -> Result<StepResult> {
    let cfg = &job.head_cfg;
    let mut x = job.train_data.features.select_rows(batch_idx);
    let mut labels: Vec<SoftLabel> = batch_idx
        .iter()
        .map(|&i| build_label(job.train_data.labels[i], cfg))
        .collect::<Result<_>>()?;

    if let Some(v) = job.variants.as_ref().filter(|v| v.mixup) {
        let lambda = sample_mixup_lambda(v.config.mixup_alpha, mixup_rng)?;
        let mut perm: Vec<usize> = (0..batch_idx.len()).collect();
        mixup_rng.shuffle(&mut perm);
        x = mix_rows(&x, &perm, lambda);
        labels = labels
            .iter()
            .enumerate()
            .map(|(i, a)| mixup_labels(a, &labels[perm[i]], lambda))
            .collect::<Result<_>>()?;
    }

    let (feats, cache) = match backbone.as_ref() {
        Some(mlp) => {
            let (f, c) = backbone::forward(&x, mlp)?;
            (f, Some(c))
        }
        None => (x, None),
    };

    let ew = sample_sub_centers(head, cfg, eps_rng)?;

    // Margin targeting keys off the raw (possibly mixed) label mass; the
    // smoothed distribution is only the loss target.
    let loss_labels: Vec<SoftLabel> = match job.variants.as_ref().filter(|v| v.label_smoothing) {
        Some(v) => labels
            .iter()
            .map(|l| smooth_label(l, v.config.smoothing_eps, cfg.total_slots()))
            .collect::<Result<_>>()?,
        None => labels.clone(),
    };

    let (bd, d_w, d_ls, d_feats) = match job.variants.as_ref().filter(|v| v.am_softmax) {
        Some(v) => {
            let z = am_logits(&feats, &ew, &labels, &v.config)?;
            let probs = softmax(&z)?;
            let l_m = ce_loss(&probs, &loss_labels)?;
            let bd = total_loss(l_m, sigma_loss(head), cfg.sigma_loss_weight);
            let n = probs.rows() as f64;
            let mut dz = Mat::zeros(probs.rows(), probs.cols());
            for i in 0..probs.rows() {
                for (s, &tau) in loss_labels[i].probs().iter().enumerate() {
                    dz[(i, s)] = (probs.at(i, s) - tau) / n;
                }
            }
            let (d_wm, d_feats) = am_backward(&feats, &ew, &dz, &v.config)?;
            let (d_w, d_ls) = am_chain_to_params(&d_wm, &ew, head, cfg)?;
            (bd, d_w, d_ls, d_feats)
        }
        None => {
            let (bd, grads) = backward(&feats, &loss_labels, &ew, head, cfg)?;
            (bd, grads.d_w, grads.d_log_sigma, grads.d_x)
        }
    };

    if !bd.total.is_finite() {
        return Err(Error::NonFinite {
            what: "training loss".into(),
            index: 0,
        });
    }

    let backbone_grads = match (backbone.as_ref(), cache.as_ref()) {
        (Some(mlp), Some(c)) => Some(backbone::backward(&d_feats, c, mlp)?.0),
        _ => None,
    };
    let grads = ModelGrads {
        d_w,
        d_log_sigma: d_ls,
        backbone: backbone_grads,
    };
    adamw_step(head, backbone.as_mut(), &grads, opt, lr, &job.config)?;
    Ok(StepResult {
        l_m: bd.l_m,
        l_sigma: bd.l_sigma,
        total: bd.total,
    })
}

/// Run the full loop. `sink` sees each epoch's record as soon as it exists,
/// in order; the same records come back in the output.
pub fn train(
    job: &TrainJob,
    mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutput> {
    job.config.validate()?;
    job.head_cfg.validate()?;
    if let Some(v) = &job.variants {
        v.config.validate()?;
    }
    if job.train_data.is_empty() || job.test_data.is_empty() {
        return Err(Error::InvalidDimensions(
            "training needs non-empty train and test splits".into(),
        ));
    }
    let c = job.head_cfg.num_classes;
    job.train_data.check_labels(c)?;
    job.test_data.check_labels(c)?;
    let input_dim = job.train_data.dim();
    if job.test_data.dim() != input_dim {
        return Err(Error::InvalidDimensions(format!(
            "train split has {input_dim} feature columns, test has {}",
            job.test_data.dim()
        )));
    }
    if let Some(spec) = &job.backbone {
        spec.validate()?;
        if spec.input_dim() != input_dim || spec.output_dim() != job.head_cfg.feature_dim {
            return Err(Error::InvalidDimensions(format!(
                "backbone maps {} -> {}, data/head expect {} -> {}",
                spec.input_dim(),
                spec.output_dim(),
                input_dim,
                job.head_cfg.feature_dim
            )));
        }
    } else if input_dim != job.head_cfg.feature_dim {
        return Err(Error::InvalidDimensions(format!(
            "no backbone: data dimension {} must equal head feature_dim {}",
            input_dim, job.head_cfg.feature_dim
        )));
    }

    let seed = job.config.seed;
    let mut head = HeadParams::init(
        &job.head_cfg,
        &mut RngStream::substream(seed, STREAM_HEAD_INIT),
    );
    let mut backbone = match &job.backbone {
        Some(spec) => Some(MlpParams::init(
            spec,
            &mut RngStream::substream(seed, STREAM_BACKBONE_INIT),
        )?),
        None => None,
    };
    let mut shuffle_rng = RngStream::substream(seed, STREAM_SHUFFLE);
    let mut eps_rng = RngStream::substream(seed, STREAM_SUBCENTER);
    let mut mixup_rng = RngStream::substream(seed, STREAM_MIXUP);

    let n = job.train_data.len();
    let bs = job.config.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs);
    let total_steps = steps_per_epoch * job.config.epochs;
    let mut opt = OptimizerState::new(&head, backbone.as_ref());

    let mut last_good = (head.clone(), backbone.clone());
    let lin = collapse_to_linear(&head);
    let mut train_acc = evaluate(&lin, backbone.as_ref(), job.train_data)?;
    let mut test_acc = evaluate(&lin, backbone.as_ref(), job.test_data)?;

    let mut metrics = Vec::with_capacity(job.config.epochs);
    let mut global_step = 0usize;
    for epoch in 0..job.config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle_rng.shuffle(&mut order);
        let (mut sum_lm, mut sum_ls, mut sum_total) = (0.0, 0.0, 0.0);
        let mut last_lr = 0.0;
        for start in (0..n).step_by(bs) {
            let batch = &order[start..(start + bs).min(n)];
            let lr = lr_at(global_step, total_steps, &job.config);
            last_lr = lr;
            let outcome = run_step(
                job,
                &mut head,
                &mut backbone,
                &mut opt,
                lr,
                batch,
                &mut eps_rng,
                &mut mixup_rng,
            );
            let step = match outcome {
                Ok(s) => s,
                Err(Error::NonFinite { .. }) | Err(Error::NonFiniteLoss { .. }) => {
                    let path = job.abort_dir.as_deref().and_then(|dir| {
                        write_last_good(dir, &last_good.0, &job.head_cfg, last_good.1.as_ref())
                    });
                    return Err(Error::NonFiniteLoss {
                        step: global_step as u64,
                        last_good: path,
                    });
                }
                Err(other) => return Err(other),
            };
            if !(head.log_sigma.all_finite() && head.w.all_finite()) {
                let path = job.abort_dir.as_deref().and_then(|dir| {
                    write_last_good(dir, &last_good.0, &job.head_cfg, last_good.1.as_ref())
                });
                return Err(Error::NonFiniteLoss {
                    step: global_step as u64,
                    last_good: path,
                });
            }
            last_good = (head.clone(), backbone.clone());
            sum_lm += step.l_m;
            sum_ls += step.l_sigma;
            sum_total += step.total;
            global_step += 1;
        }

        if (epoch + 1) % job.config.eval_every == 0 || epoch + 1 == job.config.epochs {
            let lin = collapse_to_linear(&head);
            train_acc = evaluate(&lin, backbone.as_ref(), job.train_data)?;
            test_acc = evaluate(&lin, backbone.as_ref(), job.test_data)?;
        }
        let spe = steps_per_epoch as f64;
        let record = MetricsRecord {
            epoch,
            step: global_step,
            lr: last_lr,
            l_m: sum_lm / spe,
            l_sigma: sum_ls / spe,
            total: sum_total / spe,
            train_acc,
            test_acc,
            mean_sigma_sq: head.mean_sigma_sq(),
        };
        sink(&record)?;
        metrics.push(record);
    }

    Ok(TrainOutput {
        head,
        backbone,
        metrics,
    })
}
