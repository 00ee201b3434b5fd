use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{ActivationSpec, LossKind, ModelSpec};
use crate::regularize::{LrSchedule, RegularizerSpec};

use super::dataset::{make_synthetic, Dataset, Split, SyntheticSpec};
use super::idx::{concat, load_idx};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Synthetic(SyntheticSpec),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        #[serde(default = "ten")]
        num_classes: usize,
        /// Keep only the first `limit` samples of each file.
        #[serde(default)]
        limit: Option<usize>,
    },
}

fn ten() -> usize {
    10
}

impl DataConfig {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataConfig::Synthetic(s) => make_synthetic(s),
            DataConfig::Idx { train_images, train_labels, test_images, test_labels, num_classes, limit } => {
                let cut = |ds: Dataset| -> Result<Dataset> {
                    match limit {
                        Some(m) if *m < ds.len() => {
                            let idx: Vec<usize> = (0..*m).collect();
                            let b = ds.full_batch()?.select(&idx)?;
                            Dataset::new(b.inputs, b.targets, ds.split[..*m].to_vec(), ds.num_classes)
                        }
                        _ => Ok(ds),
                    }
                };
                let train = cut(load_idx(train_images, train_labels, *num_classes, Split::Train)?)?;
                match (test_images, test_labels) {
                    (Some(i), Some(l)) => concat(&train, &cut(load_idx(i, l, *num_classes, Split::Test)?)?),
                    (None, None) => Ok(train),
                    _ => Err(Error::InvalidArgument("test_images and test_labels go together".into())),
                }
            }
        }
    }
}

fn default_lr() -> f64 {
    0.1
}

fn default_epochs() -> usize {
    10
}

fn default_batch_size() -> usize {
    32
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

/// One training run. `seed` has no default and must be present in every
/// config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    pub activation: ActivationSpec,
    #[serde(default)]
    pub bias: bool,
    pub loss: LossKind,
    #[serde(default)]
    pub regularizer: RegularizerSpec,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        ActivationSpec::new(self.activation.kind, self.activation.beta)?;
        self.regularizer.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        if let DataConfig::Synthetic(s) = &self.data {
            let classification = s.kind != super::dataset::SyntheticKind::TeacherMlp;
            if self.loss == LossKind::CrossEntropy && !classification {
                return Err(Error::InvalidArgument("cross_entropy needs classification data".into()));
            }
        }
        Ok(())
    }

    pub fn model_spec(&self, data: &Dataset) -> Result<ModelSpec> {
        let mut widths = vec![data.input_dim()];
        widths.extend(&self.hidden);
        widths.push(data.target_dim());
        Ok(ModelSpec::new(widths, self.activation)?.with_bias(self.bias))
    }

    /// SHA-256 over the canonical JSON of everything except `out_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
