//! Run configuration: one strict JSON document wiring data, backbone, head,
//! optional variants, and the optimizer together.
//!
//! Unknown keys are rejected everywhere; missing keys fall back to the same
//! defaults the library uses. Parse failures report line, column, and byte
//! offset into the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use multicenter::backbone::MlpSpec;
use multicenter::data::{self, Dataset, MixtureSpec};
use multicenter::head::HeadConfig;
use multicenter::trainer::TrainConfig;
use multicenter::variants::{ActiveVariants, VariantConfig};
use multicenter::{Error, Result};

/// Where the samples come from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Synthetic Gaussian mixture, generated on the fly.
    Mixture(MixtureSpec),
    /// IDX image/label file pairs.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// Headered CSVs with a named label column.
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: String,
    },
}

fn default_label_column() -> String {
    "label".into()
}

impl DataConfig {
    /// Load (or generate) the train and test splits.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataConfig::Mixture(spec) => data::gen_mixture(spec),
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => Ok((
                data::load_idx(train_images, train_labels)?,
                data::load_idx(test_images, test_labels)?,
            )),
            DataConfig::Csv {
                train,
                test,
                label_column,
            } => Ok((
                data::load_csv(train, label_column)?,
                data::load_csv(test, label_column)?,
            )),
        }
    }
}

/// The `variants` section: three enable switches plus optional overrides of
/// the shared knobs. Absent knobs keep the library defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantsSection {
    #[serde(default)]
    pub use_label_smoothing: bool,
    #[serde(default)]
    pub use_mixup: bool,
    #[serde(default)]
    pub use_am_softmax: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smoothing_eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mixup_alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub am_margin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub am_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub margin_on_subcenters: Option<bool>,
}

impl VariantsSection {
    pub fn resolve(&self) -> ActiveVariants {
        let mut config = VariantConfig::default();
        if let Some(v) = self.smoothing_eps {
            config.smoothing_eps = v;
        }
        if let Some(v) = self.mixup_alpha {
            config.mixup_alpha = v;
        }
        if let Some(v) = self.am_margin {
            config.am_margin = v;
        }
        if let Some(v) = self.am_scale {
            config.am_scale = v;
        }
        if let Some(v) = self.margin_on_subcenters {
            config.margin_on_subcenters = v;
        }
        ActiveVariants {
            config,
            label_smoothing: self.use_label_smoothing,
            mixup: self.use_mixup,
            am_softmax: self.use_am_softmax,
        }
    }

    pub fn any_enabled(&self) -> bool {
        self.use_label_smoothing || self.use_mixup || self.use_am_softmax
    }
}

/// One training run, fully described.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<MlpSpec>,
    pub head: HeadConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variants: Option<VariantsSection>,
    #[serde(default)]
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// The variants to hand the trainer, `None` when nothing is switched on.
    pub fn active_variants(&self) -> Option<ActiveVariants> {
        self.variants
            .as_ref()
            .filter(|v| v.any_enabled())
            .map(VariantsSection::resolve)
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    // serde_json reports 1-based lines and columns.
    let mut offset = 0;
    for (i, l) in text.split('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len() + 1;
    }
    text.len()
}

/// Parse a strict `RunConfig` from JSON text, reporting the position of the
/// first problem.
pub fn parse_run_config(text: &str, origin: &Path) -> Result<RunConfig> {
    match serde_json::from_str::<RunConfig>(text) {
        Ok(cfg) => Ok(cfg),
        Err(e) => {
            let (line, column) = (e.line(), e.column());
            Err(Error::InvalidConfig(format!(
                "{}: line {line}, column {column} (byte offset {}): {e}",
                origin.display(),
                byte_offset(text, line, column)
            )))
        }
    }
}

/// Read and parse a run config file.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_run_config(&text, path)
}
