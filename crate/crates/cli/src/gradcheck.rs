//! Central finite-difference verification of every analytic gradient: head
//! centers, log-sigmas, input features, and backbone layers, with the
//! sub-center noise frozen while parameters are perturbed.

use multicenter::backbone::{self, MlpParams, MlpSpec};
use multicenter::head::{
    backward, build_label, step_loss, ExpandedWeights, HeadConfig, HeadParams, SoftLabel,
};
use multicenter::numerics::{Mat, RngStream};
use multicenter::{Error, Result};

pub const TOLERANCE: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
/// Relative errors are measured against max(|analytic|, |numeric|, FLOOR) so
/// near-zero gradients are compared absolutely, where finite differences
/// bottom out around 1e-11.
const REL_FLOOR: f64 = 1e-3;

/// Upper bounds for the randomly drawn instance shapes.
#[derive(Clone, Copy, Debug)]
pub struct CheckBounds {
    pub max_dim: usize,
    pub max_classes: usize,
    pub max_sub_centers: usize,
    pub max_batch: usize,
}

impl Default for CheckBounds {
    fn default() -> Self {
        Self {
            max_dim: 4,
            max_classes: 3,
            max_sub_centers: 2,
            max_batch: 5,
        }
    }
}

/// Worst coordinate seen for one gradient tensor across all trials.
#[derive(Clone, Debug)]
pub struct TensorReport {
    pub name: &'static str,
    pub max_rel: f64,
    pub flat_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

impl TensorReport {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            max_rel: 0.0,
            flat_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            entries: 0,
        }
    }

    fn update(&mut self, index: usize, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.entries += 1;
        if rel > self.max_rel {
            self.max_rel = rel;
            self.flat_index = index;
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }

    pub fn ok(&self) -> bool {
        self.max_rel < TOLERANCE
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOutcome {
    pub reports: Vec<TensorReport>,
    pub trials: usize,
}

impl GradCheckOutcome {
    pub fn all_ok(&self) -> bool {
        self.reports.iter().all(TensorReport::ok)
    }

    pub fn worst(&self) -> Option<&TensorReport> {
        self.reports
            .iter()
            .max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
    }
}

/// Which analytic tensor to sign-flip before comparing, so the failure path
/// stays testable end to end.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sabotage {
    Dw,
    Dsigma,
    Dx,
}

impl Sabotage {
    pub fn from_env() -> Result<Option<Self>> {
        match std::env::var("MC_GRADCHECK_SABOTAGE") {
            Ok(v) => Self::parse(&v).map(Some),
            Err(_) => Ok(None),
        }
    }

    pub fn parse(v: &str) -> Result<Self> {
        match v {
            "dw" => Ok(Self::Dw),
            "dsigma" => Ok(Self::Dsigma),
            "dx" => Ok(Self::Dx),
            other => Err(Error::InvalidConfig(format!(
                "MC_GRADCHECK_SABOTAGE must be dw, dsigma, or dx, got {other:?}"
            ))),
        }
    }
}

struct Instance {
    cfg: HeadConfig,
    params: HeadParams,
    backbone: Option<MlpParams>,
    x: Mat,
    labels: Vec<SoftLabel>,
    eps: Mat,
}

impl Instance {
    /// Total loss with the trial's frozen noise, from possibly perturbed
    /// parameters and inputs.
    fn loss(&self, params: &HeadParams, backbone: Option<&MlpParams>, x: &Mat) -> Result<f64> {
        let feats = match backbone {
            Some(mlp) => backbone::forward_features(x, mlp)?,
            None => x.clone(),
        };
        let ew = ExpandedWeights::with_noise(params, &self.cfg, self.eps.clone())?;
        Ok(step_loss(&feats, &self.labels, &ew, params, &self.cfg)?.total)
    }
}

fn fd(
    report: &mut TensorReport,
    analytic: &[f64],
    mut eval: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<()> {
    for (i, &a) in analytic.iter().enumerate() {
        let up = eval(i, FD_STEP)?;
        let down = eval(i, -FD_STEP)?;
        let numeric = (up - down) / (2.0 * FD_STEP);
        report.update(i, a, numeric);
    }
    Ok(())
}

/// Keep any hidden pre-activation away from the ReLU kink so central
/// differences stay two-sided.
fn clears_relu_kinks(x: &Mat, backbone: &MlpParams) -> Result<bool> {
    let (_, cache) = backbone::forward(x, backbone)?;
    Ok(cache
        .preacts()
        .iter()
        .all(|z| z.data().iter().all(|v| v.abs() > 1e-4)))
}

fn draw_instance(bounds: &CheckBounds, with_backbone: bool, rng: &mut RngStream) -> Result<Instance> {
    let d = 1 + rng.below(bounds.max_dim);
    let c = 2 + rng.below(bounds.max_classes.saturating_sub(1).max(1));
    let k = rng.below(bounds.max_sub_centers + 1);
    let n = 1 + rng.below(bounds.max_batch);

    let mut cfg = HeadConfig::new(d, c);
    cfg.sub_centers = k;
    cfg.main_label_mass = if k == 0 { 1.0 } else { 0.5 };
    cfg.sigma_loss_weight = 0.7;
    cfg.sigma_init = 1.2;
    cfg.validate()?;

    let params = HeadParams::init(&cfg, rng);
    let labels: Vec<SoftLabel> = (0..n)
        .map(|_| build_label(rng.below(c), &cfg))
        .collect::<Result<_>>()?;
    let eps = rng.standard_normal_mat(d, c * k);

    let (backbone, x) = if with_backbone {
        let in_dim = 1 + rng.below(bounds.max_dim);
        let hidden = 2 + rng.below(4);
        let spec = MlpSpec::new(vec![in_dim, hidden, d]);
        let mlp = MlpParams::init(&spec, rng)?;
        let mut x = rng.standard_normal_mat(n, in_dim);
        let mut attempts = 0;
        while !clears_relu_kinks(&x, &mlp)? {
            x = rng.standard_normal_mat(n, in_dim);
            attempts += 1;
            if attempts > 200 {
                return Err(Error::InvalidConfig(
                    "could not draw inputs clear of ReLU kinks".into(),
                ));
            }
        }
        (Some(mlp), x)
    } else {
        (None, rng.standard_normal_mat(n, d))
    };

    Ok(Instance {
        cfg,
        params,
        backbone,
        x,
        labels,
        eps,
    })
}

/// Run `trials` random instances, half of them behind a small MLP, and
/// aggregate the worst coordinate per tensor.
pub fn run(
    bounds: &CheckBounds,
    trials: usize,
    seed: u64,
    sabotage: Option<Sabotage>,
) -> Result<GradCheckOutcome> {
    let mut rng = RngStream::from_seed(seed);
    let mut r_dw = TensorReport::new("dW");
    let mut r_dsigma = TensorReport::new("dlog_sigma");
    let mut r_dx = TensorReport::new("dX");
    let mut r_bw = TensorReport::new("backbone dW");
    let mut r_bb = TensorReport::new("backbone db");

    for trial in 0..trials {
        let with_backbone = trial % 2 == 1;
        let inst = draw_instance(bounds, with_backbone, &mut rng)?;

        let (feats, cache) = match inst.backbone.as_ref() {
            Some(mlp) => {
                let (f, c) = backbone::forward(&inst.x, mlp)?;
                (f, Some(c))
            }
            None => (inst.x.clone(), None),
        };
        let ew = ExpandedWeights::with_noise(&inst.params, &inst.cfg, inst.eps.clone())?;
        let (_, grads) = backward(&feats, &inst.labels, &ew, &inst.params, &inst.cfg)?;

        let mut d_w = grads.d_w;
        let mut d_sigma = grads.d_log_sigma;
        let (bb_grads, mut d_input) = match (inst.backbone.as_ref(), cache.as_ref()) {
            (Some(mlp), Some(c)) => {
                let (g, dx) = backbone::backward(&grads.d_x, c, mlp)?;
                (Some(g), dx)
            }
            _ => (None, grads.d_x),
        };
        match sabotage {
            Some(Sabotage::Dw) => d_w = d_w.scale(-1.0),
            Some(Sabotage::Dsigma) => d_sigma = d_sigma.scale(-1.0),
            Some(Sabotage::Dx) => d_input = d_input.scale(-1.0),
            None => {}
        }

        fd(&mut r_dw, d_w.data(), |i, delta| {
            let mut p = inst.params.clone();
            p.w.data_mut()[i] += delta;
            inst.loss(&p, inst.backbone.as_ref(), &inst.x)
        })?;
        fd(&mut r_dsigma, d_sigma.data(), |i, delta| {
            let mut p = inst.params.clone();
            p.log_sigma.data_mut()[i] += delta;
            inst.loss(&p, inst.backbone.as_ref(), &inst.x)
        })?;
        fd(&mut r_dx, d_input.data(), |i, delta| {
            let mut x = inst.x.clone();
            x.data_mut()[i] += delta;
            inst.loss(&inst.params, inst.backbone.as_ref(), &x)
        })?;
        if let (Some(mlp), Some(g)) = (inst.backbone.as_ref(), bb_grads.as_ref()) {
            for (layer_idx, layer_grad) in g.d_w.iter().enumerate() {
                fd(&mut r_bw, layer_grad.data(), |i, delta| {
                    let mut b = mlp.clone();
                    b.layers[layer_idx].w.data_mut()[i] += delta;
                    inst.loss(&inst.params, Some(&b), &inst.x)
                })?;
            }
            for (layer_idx, bias_grad) in g.d_b.iter().enumerate() {
                fd(&mut r_bb, bias_grad, |i, delta| {
                    let mut b = mlp.clone();
                    b.layers[layer_idx].b[i] += delta;
                    inst.loss(&inst.params, Some(&b), &inst.x)
                })?;
            }
        }
    }

    Ok(GradCheckOutcome {
        reports: vec![r_dw, r_dsigma, r_dx, r_bw, r_bb],
        trials,
    })
}
