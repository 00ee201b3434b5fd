//! Model checkpoints.
//!
//! Two layouts share one header:
//!
//! * `*.json`: a single object `{"header": {...}, "params": [...]}`.
//! * anything else: raw little-endian `f64` values in flattening order, with
//!   the header stored next to it as `<file>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::ParamVector;

use super::model::{Model, ModelSpec};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelSpec,
    pub seed: Option<u64>,
    pub num_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamVector,
}

impl Checkpoint {
    pub fn new(model: &Model, seed: Option<u64>) -> Self {
        Self {
            header: CheckpointHeader {
                version: CHECKPOINT_VERSION,
                model: model.spec.clone(),
                seed,
                num_params: model.params.len(),
            },
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        Model::new(self.header.model, self.params)
    }

    fn is_json(path: &Path) -> bool {
        path.extension().is_some_and(|e| e == "json")
    }

    pub fn header_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if Self::is_json(path) {
            fs::write(path, serde_json::to_vec_pretty(self)?)?;
        } else {
            let mut bytes = Vec::with_capacity(8 * self.params.len());
            for v in self.params.as_slice() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(path, bytes)?;
            fs::write(Self::header_path(path), serde_json::to_vec_pretty(&self.header)?)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = if Self::is_json(path) {
            serde_json::from_slice::<Checkpoint>(&fs::read(path)?)?
        } else {
            let header: CheckpointHeader = serde_json::from_slice(&fs::read(Self::header_path(path))?)?;
            let bytes = fs::read(path)?;
            if bytes.len() % 8 != 0 {
                return Err(Error::Format(format!("{} is not a whole number of f64 values", path.display())));
            }
            let params = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<_>>();
            Checkpoint { header, params: ParamVector::new(params) }
        };
        if ck.header.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", ck.header.version)));
        }
        if ck.params.len() != ck.header.num_params || ck.header.num_params != ck.header.model.num_params() {
            return Err(Error::Format(format!(
                "checkpoint declares {} parameters, holds {}, model needs {}",
                ck.header.num_params,
                ck.params.len(),
                ck.header.model.num_params()
            )));
        }
        if !ck.params.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(ck)
    }
}
