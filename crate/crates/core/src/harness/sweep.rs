use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::ActivationSpec;

use super::config::RunConfig;
use super::train::{train, RunStatus};

pub const SWEEP_CSV_SCHEMA: &str = "# nmekit sweep v1";
pub const SWEEP_FILE: &str = "sweep.csv";

fn default_rho() -> Vec<f64> {
    vec![0.0, 0.01, 0.03, 0.1]
}

fn default_activations() -> Vec<ActivationSpec> {
    vec![ActivationSpec::relu(), ActivationSpec::gelu()]
}

/// A grid of runs around `base`. Empty axes keep the base value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub base: RunConfig,
    #[serde(default = "default_rho")]
    pub rho: Vec<f64>,
    #[serde(default)]
    pub sigma2: Vec<f64>,
    #[serde(default = "default_activations")]
    pub activations: Vec<ActivationSpec>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub name: String,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: String,
    pub activation: String,
    pub rho: f64,
    pub sigma2: f64,
    pub seed: u64,
    pub status: RunStatus,
    pub train_loss: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub config_hash: String,
}

impl SweepConfig {
    pub fn cells(&self) -> Vec<SweepCell> {
        let or_base = |v: &[f64], b: f64| if v.is_empty() { vec![b] } else { v.to_vec() };
        let rhos = or_base(&self.rho, self.base.regularizer.rho);
        let sigmas = or_base(&self.sigma2, self.base.regularizer.sigma2);
        let acts = if self.activations.is_empty() { vec![self.base.activation] } else { self.activations.clone() };
        let seeds = if self.seeds.is_empty() { vec![self.base.seed] } else { self.seeds.clone() };
        let mut cells = Vec::new();
        for act in &acts {
            for &rho in &rhos {
                for &sigma2 in &sigmas {
                    for &seed in &seeds {
                        let mut c = self.base.clone();
                        c.activation = *act;
                        c.regularizer.rho = rho;
                        c.regularizer.sigma2 = sigma2;
                        c.seed = seed;
                        let name = format!("{}_rho{rho}_s2{sigma2}_seed{seed}", act.to_string().replace(':', "-"));
                        cells.push(SweepCell { name, config: c });
                    }
                }
            }
        }
        cells
    }
}

/// Runs every cell in parallel, each in `out/<cell>`, and writes one summary
/// row per cell to `out/sweep.csv` in grid order.
pub fn sweep(config: &SweepConfig, out: &Path) -> Result<Vec<SweepRow>> {
    let cells = config.cells();
    for c in &cells {
        c.config.validate()?;
    }
    fs::create_dir_all(out)?;
    let rows = cells
        .par_iter()
        .map(|cell| {
            let s = train(&cell.config, &out.join(&cell.name))?.summary;
            Ok(SweepRow {
                cell: cell.name.clone(),
                activation: cell.config.activation.to_string(),
                rho: cell.config.regularizer.rho,
                sigma2: cell.config.regularizer.sigma2,
                seed: cell.config.seed,
                status: s.status,
                train_loss: s.train.as_ref().map(|m| m.loss),
                train_accuracy: s.train.as_ref().and_then(|m| m.accuracy),
                test_loss: s.test.as_ref().map(|m| m.loss),
                test_accuracy: s.test.as_ref().and_then(|m| m.accuracy),
                config_hash: s.config_hash,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_sweep_csv(&rows, &out.join(SWEEP_FILE))?;
    Ok(rows)
}

fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{SWEEP_CSV_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record([
        "cell",
        "activation",
        "rho",
        "sigma2",
        "seed",
        "status",
        "train_loss",
        "train_accuracy",
        "test_loss",
        "test_accuracy",
        "config_hash",
    ])?;
    let o = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.cell.clone(),
            r.activation.clone(),
            r.rho.to_string(),
            r.sigma2.to_string(),
            r.seed.to_string(),
            r.status.name().to_owned(),
            o(r.train_loss),
            o(r.train_accuracy),
            o(r.test_loss),
            o(r.test_accuracy),
            r.config_hash.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
