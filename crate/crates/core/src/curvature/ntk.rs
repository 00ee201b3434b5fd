use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::Problem;
use crate::tape::ParamVector;

use super::dense::{full_matrix, general_real_eigenvalues, nonzero, symmetric_eigenvalues, DEFAULT_DENSE_CAP};
use super::operator::{CurvatureKind, CurvatureOperator};

/// Empirical NTK `J Jᵀ / D` over a batch of `D` points; rows and columns
/// are output coordinates ordered sample-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NtkMatrix {
    pub matrix: DMatrix<f64>,
    pub dataset_size: usize,
    pub outputs: usize,
}

impl NtkMatrix {
    pub fn rank(&self, rel_tol: f64) -> usize {
        nonzero(&symmetric_eigenvalues(&self.matrix), rel_tol).len()
    }
}

pub fn ntk_from_operator(op: &CurvatureOperator) -> Result<NtkMatrix> {
    let (k, d) = op.outputs().dims();
    let j = op.jacobian()?;
    let matrix = &j * j.transpose() / d as f64;
    Ok(NtkMatrix { matrix, dataset_size: d, outputs: k })
}

pub fn ntk(problem: &Problem, params: &ParamVector) -> Result<NtkMatrix> {
    ntk_from_operator(&CurvatureOperator::new(CurvatureKind::GaussNewton, problem, params)?)
}

/// Nonzero spectra of `Θ̂ H_z` (general eigensolve) and of
/// the Gauss-Newton matrix extracted from `gnvp` (symmetric eigensolve),
/// both ascending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralLink {
    pub ntk_side: Vec<f64>,
    pub gn_side: Vec<f64>,
}

impl SpectralLink {
    /// Largest relative mismatch between paired eigenvalues, or infinity if
    /// the counts differ.
    pub fn max_rel_error(&self) -> f64 {
        if self.ntk_side.len() != self.gn_side.len() {
            return f64::INFINITY;
        }
        self.ntk_side
            .iter()
            .zip(&self.gn_side)
            .map(|(a, b)| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }

    /// Largest paired mismatch relative to the largest GN eigenvalue.
    pub fn max_scaled_error(&self) -> f64 {
        if self.ntk_side.len() != self.gn_side.len() {
            return f64::INFINITY;
        }
        let scale = self.gn_side.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        self.ntk_side.iter().zip(&self.gn_side).map(|(a, b)| (a - b).abs() / scale).fold(0.0, f64::max)
    }
}

pub fn ntk_gn_spectra(problem: &Problem, params: &ParamVector, rel_tol: f64) -> Result<SpectralLink> {
    let op = CurvatureOperator::new(CurvatureKind::GaussNewton, problem, params)?;
    let theta = ntk_from_operator(&op)?;
    let hz = op.output_hessian()?;
    let gn = full_matrix(&op, DEFAULT_DENSE_CAP)?;
    Ok(SpectralLink {
        ntk_side: nonzero(&general_real_eigenvalues(&(&theta.matrix * &hz))?, rel_tol),
        gn_side: nonzero(&symmetric_eigenvalues(&gn), rel_tol),
    })
}
