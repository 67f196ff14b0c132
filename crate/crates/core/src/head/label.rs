//! Slot layout of the expanded classifier and the multi-center soft label.
//!
//! Class `c` owns the `K+1` contiguous columns starting at `c * (K + 1)`:
//! the main center first, then its `K` sub-centers. A class label `t` becomes
//! a distribution over all `C(K+1)` slots with mass `alpha` on the main slot
//! and `(1 - alpha) / K` on each sub slot.

use crate::{Error, Result};

use super::HeadConfig;

/// Which column of a class block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Main,
    /// k-th sub-center, 1-based (`1..=K`).
    Sub(usize),
}

/// Column index of `(class, slot)` in the expanded `C(K+1)`-column layout.
pub fn slot_index(
    class: usize,
    slot: Slot,
    num_classes: usize,
    sub_centers: usize,
) -> Result<usize> {
    if class >= num_classes {
        return Err(Error::ClassOutOfRange {
            class,
            num_classes,
        });
    }
    let base = class * (sub_centers + 1);
    match slot {
        Slot::Main => Ok(base),
        Slot::Sub(k) => {
            if k == 0 || k > sub_centers {
                return Err(Error::SubCenterOutOfRange {
                    k,
                    sub_centers,
                });
            }
            Ok(base + k)
        }
    }
}

/// A distribution over the `C(K+1)` training slots.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabel {
    probs: Vec<f64>,
}

impl SoftLabel {
    /// Validates non-negativity and normalization (within 1e-12).
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if let Some(idx) = probs.iter().position(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "label entry {} is {}, must be finite and >= 0",
                idx, probs[idx]
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "label mass sums to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// First index of maximal mass.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// The multi-center class label for true class `t`.
pub fn build_label(t: usize, cfg: &HeadConfig) -> Result<SoftLabel> {
    if t >= cfg.num_classes {
        return Err(Error::ClassOutOfRange {
            class: t,
            num_classes: cfg.num_classes,
        });
    }
    let k = cfg.sub_centers;
    let alpha = cfg.main_label_mass;
    let mut probs = vec![0.0; cfg.total_slots()];
    probs[slot_index(t, Slot::Main, cfg.num_classes, k)?] = alpha;
    if k > 0 {
        let sub_mass = (1.0 - alpha) / k as f64;
        for j in 1..=k {
            probs[slot_index(t, Slot::Sub(j), cfg.num_classes, k)?] = sub_mass;
        }
    }
    Ok(SoftLabel { probs })
}
