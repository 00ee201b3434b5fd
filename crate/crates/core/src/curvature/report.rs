use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::nn::ModelSpec;
use crate::tape::ParamVector;

pub const REPORT_CSV_SCHEMA: &str = "# nmekit curvature-report v1";
pub const REPORT_JSON_VERSION: u32 = 1;

/// One probed quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub quantity: String,
    pub value: f64,
    pub stderr: Option<f64>,
    pub n_samples: Option<usize>,
    pub seed: Option<u64>,
}

impl ReportRow {
    pub fn exact(quantity: impl Into<String>, value: f64) -> Self {
        Self { quantity: quantity.into(), value, stderr: None, n_samples: None, seed: None }
    }

    pub fn estimate(quantity: impl Into<String>, value: f64, stderr: f64, n_samples: usize, seed: u64) -> Self {
        Self {
            quantity: quantity.into(),
            value,
            stderr: stderr.is_finite().then_some(stderr),
            n_samples: Some(n_samples),
            seed: Some(seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub schema_version: u32,
    pub probe: String,
    pub model_hash: String,
    pub rows: Vec<ReportRow>,
}

impl CurvatureReport {
    pub fn new(probe: impl Into<String>, spec: &ModelSpec, params: &ParamVector) -> Self {
        Self {
            schema_version: REPORT_JSON_VERSION,
            probe: probe.into(),
            model_hash: model_hash(spec, params),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{REPORT_CSV_SCHEMA}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["probe", "quantity", "value", "stderr", "n_samples", "seed"])?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                self.probe.clone(),
                r.quantity.clone(),
                r.value.to_string(),
                opt(r.stderr.map(|v| v.to_string())),
                opt(r.n_samples.map(|v| v.to_string())),
                opt(r.seed.map(|v| v.to_string())),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// SHA-256 over the architecture JSON and the little-endian parameter bytes.
pub fn model_hash(spec: &ModelSpec, params: &ParamVector) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec).expect("model spec serializes"));
    for v in params.as_slice() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}
