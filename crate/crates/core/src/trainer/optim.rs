//! AdamW with decoupled weight decay over the model's named tensors.
//!
//! Decay applies to the head's centers and log-sigmas and to backbone layer
//! weights; biases are exempt. Bias-corrected moments follow the standard
//! published update.

use crate::backbone::{MlpGrads, MlpParams};
use crate::head::HeadParams;
use crate::numerics::Mat;
use crate::{Error, Result};

use super::TrainConfig;

/// First and second moment accumulators for one parameter tensor.
#[derive(Clone, Debug)]
struct MomentPair {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl MomentPair {
    fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Moment accumulators per tensor plus the step counter, with running
/// beta powers for bias correction.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    slots: Vec<MomentPair>,
    step: u64,
    beta1_pow: f64,
    beta2_pow: f64,
}

impl OptimizerState {
    pub fn new(head: &HeadParams, backbone: Option<&MlpParams>) -> Self {
        let mut slots = vec![
            MomentPair::zeros(head.w.data().len()),
            MomentPair::zeros(head.log_sigma.data().len()),
        ];
        if let Some(mlp) = backbone {
            for layer in &mlp.layers {
                slots.push(MomentPair::zeros(layer.w.data().len()));
                slots.push(MomentPair::zeros(layer.b.len()));
            }
        }
        Self {
            slots,
            step: 0,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One training step's gradients for every model tensor.
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub d_w: Mat,
    pub d_log_sigma: Mat,
    pub backbone: Option<MlpGrads>,
}

struct TensorUpdate<'a> {
    name: &'a str,
    param: &'a mut [f64],
    grad: &'a [f64],
    decay: bool,
}

fn apply_update(
    t: TensorUpdate<'_>,
    pair: &mut MomentPair,
    lr: f64,
    cfg: &TrainConfig,
    bc1: f64,
    bc2: f64,
) -> Result<()> {
    if t.param.len() != t.grad.len() || t.param.len() != pair.m.len() {
        return Err(Error::InvalidDimensions(format!(
            "optimizer tensor {}: param {} values, grad {}, state {}",
            t.name,
            t.param.len(),
            t.grad.len(),
            pair.m.len()
        )));
    }
    if let Some(index) = t.grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("gradient of {}", t.name),
            index,
        });
    }
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    for i in 0..t.param.len() {
        let g = t.grad[i];
        pair.m[i] = b1 * pair.m[i] + (1.0 - b1) * g;
        pair.v[i] = b2 * pair.v[i] + (1.0 - b2) * g * g;
        if t.decay {
            t.param[i] *= 1.0 - lr * cfg.weight_decay;
        }
        let m_hat = pair.m[i] / bc1;
        let v_hat = pair.v[i] / bc2;
        t.param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

/// Advance every model tensor by one AdamW step. The state must have been
/// built for this head/backbone pair; gradients must be finite.
pub fn adamw_step(
    head: &mut HeadParams,
    backbone: Option<&mut MlpParams>,
    grads: &ModelGrads,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let expected_slots = 2 + backbone.as_ref().map_or(0, |b| 2 * b.layers.len());
    if state.slots.len() != expected_slots {
        return Err(Error::InvalidDimensions(format!(
            "optimizer state has {} tensor slots, model has {expected_slots}",
            state.slots.len()
        )));
    }
    state.step += 1;
    state.beta1_pow *= cfg.adam_beta1;
    state.beta2_pow *= cfg.adam_beta2;
    let bc1 = 1.0 - state.beta1_pow;
    let bc2 = 1.0 - state.beta2_pow;

    let mut slots = state.slots.iter_mut();
    apply_update(
        TensorUpdate {
            name: "head.w",
            param: head.w.data_mut(),
            grad: grads.d_w.data(),
            decay: true,
        },
        slots.next().expect("slot count checked"),
        lr,
        cfg,
        bc1,
        bc2,
    )?;
    apply_update(
        TensorUpdate {
            name: "head.log_sigma",
            param: head.log_sigma.data_mut(),
            grad: grads.d_log_sigma.data(),
            decay: true,
        },
        slots.next().expect("slot count checked"),
        lr,
        cfg,
        bc1,
        bc2,
    )?;
    if let Some(mlp) = backbone {
        let mg = grads.backbone.as_ref().ok_or_else(|| {
            Error::InvalidDimensions("backbone present but its gradients are missing".into())
        })?;
        if mg.d_w.len() != mlp.layers.len() {
            return Err(Error::InvalidDimensions(format!(
                "gradients cover {} backbone layers, model has {}",
                mg.d_w.len(),
                mlp.layers.len()
            )));
        }
        for (i, layer) in mlp.layers.iter_mut().enumerate() {
            apply_update(
                TensorUpdate {
                    name: &format!("backbone.layers[{i}].w"),
                    param: layer.w.data_mut(),
                    grad: mg.d_w[i].data(),
                    decay: true,
                },
                slots.next().expect("slot count checked"),
                lr,
                cfg,
                bc1,
                bc2,
            )?;
            apply_update(
                TensorUpdate {
                    name: &format!("backbone.layers[{i}].b"),
                    param: &mut layer.b,
                    grad: &mg.d_b[i],
                    decay: false,
                },
                slots.next().expect("slot count checked"),
                lr,
                cfg,
                bc1,
                bc2,
            )?;
        }
    }
    Ok(())
}
