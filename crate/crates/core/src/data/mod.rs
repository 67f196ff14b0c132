//! Dataset provisioning: a synthetic multi-modal Gaussian-mixture generator
//! plus IDX and CSV loaders.
//!
//! The generator places `clusters_per_class` Gaussian clusters per class on a
//! sphere of radius `cluster_separation`, rejecting mean pairs closer than
//! four cluster standard deviations so every class is genuinely multi-modal.
//! Everything is deterministic in the spec's seed.

mod csv_io;
mod idx;

pub use csv_io::{load_csv, write_csv};
pub use idx::load_idx;

use serde::{Deserialize, Serialize};

use crate::numerics::{Mat, RngStream};
use crate::{Error, Result};

/// RNG substream ids, disjoint from the trainer's (which start at 0).
const STREAM_MEANS: u64 = 100;
const STREAM_SAMPLES: u64 = 101;
const STREAM_SPLIT: u64 = 102;

/// How many redraws a cluster mean gets before the best candidate so far is
/// kept. Keeps generation total and deterministic even for specs where the
/// spacing constraint cannot be met (e.g. many clusters in one dimension).
const MEAN_DRAW_CAP: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub num_classes: usize,
    pub clusters_per_class: usize,
    pub dim: usize,
    pub cluster_separation: f64,
    pub cluster_scale: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0
            || self.clusters_per_class == 0
            || self.dim == 0
            || self.samples_per_class == 0
        {
            return Err(Error::InvalidConfig(format!(
                "mixture counts must all be at least 1: {self:?}"
            )));
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "cluster_separation must be positive and finite, got {}",
                self.cluster_separation
            )));
        }
        if !(self.cluster_scale > 0.0 && self.cluster_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "cluster_scale must be positive and finite, got {}",
                self.cluster_scale
            )));
        }
        Ok(())
    }
}

/// A feature matrix with aligned integer labels and a split tag.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Mat,
    pub labels: Vec<usize>,
    pub split: String,
}

impl Dataset {
    pub fn new(features: Mat, labels: Vec<usize>, split: impl Into<String>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::InvalidDimensions(format!(
                "{} feature rows for {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Largest label plus one; zero for an empty dataset.
    pub fn observed_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        for &label in &self.labels {
            if label >= num_classes {
                return Err(Error::ClassOutOfRange {
                    class: label,
                    num_classes,
                });
            }
        }
        Ok(())
    }
}

/// Where each generated row came from: cluster ids index `cluster_means`
/// rows as `class * clusters_per_class + cluster`.
#[derive(Clone, Debug)]
pub struct MixtureMeta {
    pub cluster_means: Mat,
    pub train_clusters: Vec<usize>,
    pub test_clusters: Vec<usize>,
}

fn draw_unit_direction(dim: usize, rng: &mut RngStream) -> Vec<f64> {
    loop {
        let v = rng.standard_normal(dim);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn min_dist_to(means: &[Vec<f64>], candidate: &[f64]) -> f64 {
    means
        .iter()
        .map(|m| {
            m.iter()
                .zip(candidate)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

fn draw_cluster_means(spec: &MixtureSpec, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let total = spec.num_classes * spec.clusters_per_class;
    let threshold = 4.0 * spec.cluster_scale;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(total);
    for _ in 0..total {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..MEAN_DRAW_CAP {
            let candidate: Vec<f64> = draw_unit_direction(spec.dim, rng)
                .into_iter()
                .map(|x| x * spec.cluster_separation)
                .collect();
            let dist = min_dist_to(&means, &candidate);
            if dist >= threshold {
                best = Some((dist, candidate));
                break;
            }
            if best.as_ref().is_none_or(|(d, _)| dist > *d) {
                best = Some((dist, candidate));
            }
        }
        means.push(best.expect("at least one draw").1);
    }
    means
}

/// Generate the mixture along with its cluster geometry.
pub fn gen_mixture_detailed(spec: &MixtureSpec) -> Result<(Dataset, Dataset, MixtureMeta)> {
    spec.validate()?;
    let (c, m, dim, spc) = (
        spec.num_classes,
        spec.clusters_per_class,
        spec.dim,
        spec.samples_per_class,
    );
    let mut mean_rng = RngStream::substream(spec.seed, STREAM_MEANS);
    let means = draw_cluster_means(spec, &mut mean_rng);

    // Round-robin cluster assignment gives exact per-cluster counts; the
    // sample index inside its class decides the cluster.
    let mut sample_rng = RngStream::substream(spec.seed, STREAM_SAMPLES);
    let mut all_rows: Vec<Vec<f64>> = Vec::with_capacity(c * spc);
    let mut all_clusters: Vec<usize> = Vec::with_capacity(c * spc);
    for class in 0..c {
        for j in 0..spc {
            let cluster = class * m + (j % m);
            let noise = sample_rng.standard_normal(dim);
            let row: Vec<f64> = means[cluster]
                .iter()
                .zip(&noise)
                .map(|(mu, n)| mu + spec.cluster_scale * n)
                .collect();
            all_rows.push(row);
            all_clusters.push(cluster);
        }
    }

    let n_test = spc / 5;
    let mut split_rng = RngStream::substream(spec.seed, STREAM_SPLIT);
    let mut train_rows = Vec::new();
    let mut train_labels = Vec::new();
    let mut train_clusters = Vec::new();
    let mut test_rows = Vec::new();
    let mut test_labels = Vec::new();
    let mut test_clusters = Vec::new();
    for class in 0..c {
        let mut order: Vec<usize> = (0..spc).map(|j| class * spc + j).collect();
        split_rng.shuffle(&mut order);
        for (pos, &idx) in order.iter().enumerate() {
            if pos < n_test {
                test_rows.push(all_rows[idx].clone());
                test_labels.push(class);
                test_clusters.push(all_clusters[idx]);
            } else {
                train_rows.push(all_rows[idx].clone());
                train_labels.push(class);
                train_clusters.push(all_clusters[idx]);
            }
        }
    }

    let train = Dataset::new(Mat::from_rows(&train_rows)?, train_labels, "train")?;
    let test = if test_rows.is_empty() {
        Dataset::new(Mat::zeros(0, dim), test_labels, "test")?
    } else {
        Dataset::new(Mat::from_rows(&test_rows)?, test_labels, "test")?
    };
    let mut cluster_means = Mat::zeros(c * m, dim);
    for (i, mean) in means.iter().enumerate() {
        for (j, &v) in mean.iter().enumerate() {
            cluster_means[(i, j)] = v;
        }
    }
    Ok((
        train,
        test,
        MixtureMeta {
            cluster_means,
            train_clusters,
            test_clusters,
        },
    ))
}

/// Generate a train/test pair from the spec, deterministically in its seed.
pub fn gen_mixture(spec: &MixtureSpec) -> Result<(Dataset, Dataset)> {
    gen_mixture_detailed(spec).map(|(train, test, _)| (train, test))
}
