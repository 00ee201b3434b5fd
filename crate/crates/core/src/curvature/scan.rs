use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamSlot, Problem};
use crate::tape::ParamVector;

use super::operator::{CurvatureKind, CurvatureOperator};

pub const SCAN_CSV_SCHEMA: &str = "# nmekit scan v1";

/// Grid over two same-matrix parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanSpec {
    pub index_a: usize,
    pub index_b: usize,
    pub range_a: [f64; 2],
    pub range_b: [f64; 2],
    pub resolution: usize,
}

/// Per-cell loss and Frobenius norm of the 2×2 NME block on the scanned
/// coordinates. Cells are stored row-major with `a` as the slow axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanGrid {
    pub index_a: usize,
    pub index_b: usize,
    pub values_a: Vec<f64>,
    pub values_b: Vec<f64>,
    pub loss: Vec<f64>,
    pub nme_norm: Vec<f64>,
}

fn linspace(r: [f64; 2], n: usize) -> Vec<f64> {
    (0..n).map(|i| r[0] + (r[1] - r[0]) * i as f64 / (n - 1) as f64).collect()
}

impl ScanGrid {
    pub fn resolution(&self) -> (usize, usize) {
        (self.values_a.len(), self.values_b.len())
    }

    /// Fraction of cells whose NME block norm exceeds `threshold`.
    pub fn census(&self, threshold: f64) -> f64 {
        self.nme_norm.iter().filter(|&&v| v > threshold).count() as f64 / self.nme_norm.len() as f64
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{SCAN_CSV_SCHEMA}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index_a", "index_b", "value_a", "value_b", "loss", "nme_norm"])?;
        let nb = self.values_b.len();
        for (c, (loss, norm)) in self.loss.iter().zip(&self.nme_norm).enumerate() {
            w.write_record([
                self.index_a.to_string(),
                self.index_b.to_string(),
                self.values_a[c / nb].to_string(),
                self.values_b[c % nb].to_string(),
                loss.to_string(),
                norm.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Checks that `a` and `b` index the same weight matrix.
pub fn check_same_matrix(problem: &Problem, a: usize, b: usize) -> Result<usize> {
    let locate = |i| {
        problem
            .spec
            .locate(i)
            .ok_or_else(|| Error::InvalidArgument(format!("parameter index {i} out of range")))
    };
    match (locate(a)?, locate(b)?) {
        (ParamSlot::Weight { layer: la, .. }, ParamSlot::Weight { layer: lb, .. }) if la == lb => Ok(la),
        (sa, sb) => Err(Error::InvalidArgument(format!(
            "scan needs two entries of the same weight matrix, got {sa:?} and {sb:?}"
        ))),
    }
}

/// NME block on coordinates `(a, b)` via direct products on basis vectors.
pub fn nme_block(op: &CurvatureOperator, a: usize, b: usize) -> Result<[[f64; 2]; 2]> {
    let p = op.params().len();
    let ca = op.nmevp_direct(&ParamVector::basis(p, a))?;
    let cb = op.nmevp_direct(&ParamVector::basis(p, b))?;
    Ok([[ca[a], cb[a]], [ca[b], cb[b]]])
}

pub fn nme_scan(problem: &Problem, params: &ParamVector, spec: &ScanSpec) -> Result<ScanGrid> {
    check_same_matrix(problem, spec.index_a, spec.index_b)?;
    if spec.index_a == spec.index_b {
        return Err(Error::InvalidArgument("scan needs two distinct parameters".into()));
    }
    if spec.resolution < 2 {
        return Err(Error::InvalidArgument("scan resolution must be at least 2".into()));
    }
    if spec.range_a.iter().chain(&spec.range_b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("scan ranges must be finite".into()));
    }
    let values_a = linspace(spec.range_a, spec.resolution);
    let values_b = linspace(spec.range_b, spec.resolution);
    let cells: Vec<(f64, f64)> =
        values_a.iter().flat_map(|&va| values_b.iter().map(move |&vb| (va, vb))).collect();
    let results = cells
        .par_iter()
        .map(|&(va, vb)| {
            let mut theta = params.clone();
            theta[spec.index_a] = va;
            theta[spec.index_b] = vb;
            let op = CurvatureOperator::new(CurvatureKind::Nme, problem, &theta)?;
            let blk = nme_block(&op, spec.index_a, spec.index_b)?;
            let norm = blk.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            Ok((op.loss(), norm))
        })
        .collect::<Result<Vec<_>>>()?;
    let (loss, nme_norm) = results.into_iter().unzip();
    Ok(ScanGrid { index_a: spec.index_a, index_b: spec.index_b, values_a, values_b, loss, nme_norm })
}
