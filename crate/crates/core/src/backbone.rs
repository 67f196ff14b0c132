//! A small fully connected feature extractor.
//!
//! Hidden layers use ReLU, the final layer is linear so the head sees
//! unsquashed features. Weights start from a fan-in scaled normal
//! (`N(0, 2/fan_in)`), biases start at zero. The forward pass caches layer
//! inputs and pre-activations for the exact backward pass; ReLU takes
//! subgradient zero at the kink.

use serde::{Deserialize, Serialize};

use crate::numerics::{Mat, RngStream};
use crate::{Error, Result};

/// Layer widths, input first. `[4, 32, 16]` is a 4-dim input, one ReLU layer
/// of 32 units, and a 16-dim linear output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>) -> Self {
        Self { layer_dims }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "backbone needs an input and an output width, got {:?}",
                self.layer_dims
            )));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "backbone layer widths must be positive, got {:?}",
                self.layer_dims
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }
}

/// One affine layer: `in_dim x out_dim` weights plus a bias per output unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }
}

/// The backbone's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Fan-in scaled normal init for weights, zeros for biases.
    pub fn init(spec: &MlpSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.num_layers());
        for i in 0..spec.num_layers() {
            let (fan_in, fan_out) = (spec.layer_dims[i], spec.layer_dims[i + 1]);
            let scale = (2.0 / fan_in as f64).sqrt();
            let w = rng.standard_normal_mat(fan_in, fan_out).scale(scale);
            layers.push(Layer {
                w,
                b: vec![0.0; fan_out],
            });
        }
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("backbone has no layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::InvalidConfig(format!(
                    "layer {} outputs {} features but layer {} expects {}",
                    i,
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.b.len() != layer.out_dim() {
                return Err(Error::InvalidConfig(format!(
                    "layer {} has {} bias entries for {} outputs",
                    i,
                    layer.b.len(),
                    layer.out_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.rows() * l.w.cols() + l.b.len())
            .sum()
    }

    pub fn spec(&self) -> MlpSpec {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(Layer::out_dim));
        MlpSpec::new(dims)
    }
}

/// Per-layer inputs and pre-activations from one forward pass, consumed by
/// [`backward`]. Valid only for the exact parameters and batch that built it.
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Mat>,
    preacts: Vec<Mat>,
}

impl MlpCache {
    /// Per-layer pre-activations, in layer order. Useful for spotting values
    /// sitting on the ReLU kink, where finite differences turn one-sided.
    pub fn preacts(&self) -> &[Mat] {
        &self.preacts
    }
}

/// Gradients for every layer, in layer order.
#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub d_w: Vec<Mat>,
    pub d_b: Vec<Vec<f64>>,
}

fn affine(x: &Mat, layer: &Layer) -> Result<Mat> {
    let mut z = x.matmul(&layer.w)?;
    for i in 0..z.rows() {
        for j in 0..z.cols() {
            z[(i, j)] += layer.b[j];
        }
    }
    Ok(z)
}

/// Run the batch through the network, returning features and the cache the
/// backward pass needs.
pub fn forward(x: &Mat, params: &MlpParams) -> Result<(Mat, MlpCache)> {
    if x.cols() != params.input_dim() {
        return Err(Error::InvalidDimensions(format!(
            "input has {} columns, backbone expects {}",
            x.cols(),
            params.input_dim()
        )));
    }
    let n_layers = params.layers.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut preacts = Vec::with_capacity(n_layers);
    let mut a = x.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        let z = affine(&a, layer)?;
        inputs.push(a);
        a = if i + 1 < n_layers {
            z.map(|v| if v > 0.0 { v } else { 0.0 })
        } else {
            z.clone()
        };
        preacts.push(z);
    }
    Ok((a, MlpCache { inputs, preacts }))
}

/// Features only, when no backward pass will follow.
pub fn forward_features(x: &Mat, params: &MlpParams) -> Result<Mat> {
    forward(x, params).map(|(f, _)| f)
}

/// Backward pass from the gradient of the loss with respect to the features.
/// Returns per-layer gradients and the gradient with respect to the input
/// batch.
pub fn backward(
    d_out: &Mat,
    cache: &MlpCache,
    params: &MlpParams,
) -> Result<(MlpGrads, Mat)> {
    let n_layers = params.layers.len();
    if cache.inputs.len() != n_layers || cache.preacts.len() != n_layers {
        return Err(Error::StaleCache(format!(
            "cache covers {} layers, parameters have {}",
            cache.inputs.len(),
            n_layers
        )));
    }
    for (i, layer) in params.layers.iter().enumerate() {
        if cache.inputs[i].cols() != layer.in_dim() || cache.preacts[i].cols() != layer.out_dim() {
            return Err(Error::StaleCache(format!(
                "cache for layer {i} has shapes {}x{} and {}x{}, expected widths {} and {}",
                cache.inputs[i].rows(),
                cache.inputs[i].cols(),
                cache.preacts[i].rows(),
                cache.preacts[i].cols(),
                layer.in_dim(),
                layer.out_dim()
            )));
        }
    }
    let last = &cache.preacts[n_layers - 1];
    if d_out.rows() != last.rows() || d_out.cols() != last.cols() {
        return Err(Error::InvalidDimensions(format!(
            "feature gradient is {}x{}, forward produced {}x{}",
            d_out.rows(),
            d_out.cols(),
            last.rows(),
            last.cols()
        )));
    }
    let mut d_w = vec![Mat::zeros(0, 0); n_layers];
    let mut d_b = vec![Vec::new(); n_layers];
    let mut d_z = d_out.clone();
    for i in (0..n_layers).rev() {
        d_w[i] = cache.inputs[i].transpose().matmul(&d_z)?;
        let mut db = vec![0.0; params.layers[i].out_dim()];
        for r in 0..d_z.rows() {
            for (j, acc) in db.iter_mut().enumerate() {
                *acc += d_z.at(r, j);
            }
        }
        d_b[i] = db;
        let d_a = d_z.matmul(&params.layers[i].w.transpose())?;
        if i == 0 {
            d_z = d_a;
        } else {
            let z_prev = &cache.preacts[i - 1];
            d_z = Mat::zeros(d_a.rows(), d_a.cols());
            for r in 0..d_a.rows() {
                for col in 0..d_a.cols() {
                    if z_prev.at(r, col) > 0.0 {
                        d_z[(r, col)] = d_a.at(r, col);
                    }
                }
            }
        }
    }
    Ok((MlpGrads { d_w, d_b }, d_z))
}
