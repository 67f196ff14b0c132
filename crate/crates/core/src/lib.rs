//! Multi-center classifier: a linear classification head whose per-class
//! weights parameterize conditional Gaussian distributions. During training,
//! sub-centers are sampled from those distributions (reparameterization trick)
//! and trained against a multi-center soft label plus a standard-deviation
//! regularizer. At inference the head collapses to a vanilla linear classifier
//! with no extra parameters.
//!
//! The crate is self-contained: deterministic RNG and dense f64 kernels in
//! [`numerics`], the head itself in [`head`], label/logit companions (label
//! smoothing, MixUp, additive-margin softmax) in [`variants`], a small MLP
//! feature extractor in [`backbone`], dataset provisioning in [`data`], and
//! an AdamW training loop in [`trainer`].

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod head;
pub mod numerics;
pub mod trainer;
pub mod variants;

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("sub-center index {k} out of range for K = {sub_centers} (valid: 1..=K)")]
    SubCenterOutOfRange { k: usize, sub_centers: usize },

    #[error("expanded weights are stale: {0}")]
    StaleExpansion(String),

    #[error("backbone cache does not match this forward pass: {0}")]
    StaleCache(String),

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: String, index: usize },

    #[error("cannot normalize {what} {index}: zero norm")]
    ZeroNorm { what: &'static str, index: usize },

    #[error("non-finite loss at step {step}{}", last_good.as_ref().map(|p| format!("; last good checkpoint: {}", p.display())).unwrap_or_default())]
    NonFiniteLoss {
        step: u64,
        last_good: Option<PathBuf>,
    },

    #[error("checkpoint error in {path} at offset {offset}: {msg}")]
    Checkpoint {
        path: String,
        offset: usize,
        msg: String,
    },

    #[error("{file} at offset {offset}: {msg}")]
    Idx {
        file: String,
        offset: usize,
        msg: String,
    },

    #[error("csv error in {path}, row {row}: {msg}")]
    Csv {
        path: String,
        row: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
