use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tape::ParamVector;

use super::operator::LinearOperator;

pub const DEFAULT_DENSE_CAP: usize = 2000;

/// Materializes `op` column by column (`column i = apply(e_i)`).
pub fn full_matrix<O: LinearOperator + ?Sized>(op: &O, cap: usize) -> Result<DMatrix<f64>> {
    let n = op.dim();
    if n > cap {
        return Err(Error::CapExceeded { params: n, cap });
    }
    let cols = (0..n)
        .into_par_iter()
        .map(|i| op.apply(&ParamVector::basis(n, i)))
        .collect::<Result<Vec<_>>>()?;
    let mut m = DMatrix::zeros(n, n);
    for (i, c) in cols.iter().enumerate() {
        for (r, v) in c.as_slice().iter().enumerate() {
            m[(r, i)] = *v;
        }
    }
    Ok(m)
}

/// Largest `|m_ij − m_ji|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (&m.transpose() - m).abs().max()
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Real parts of the eigenvalues of a general square matrix, ascending.
///
/// Intended for products of symmetric PSD matrices, whose spectrum is real;
/// fails if any eigenvalue has a non-negligible imaginary part.
pub fn general_real_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let scale = m.abs().max().max(f64::MIN_POSITIVE);
    let ev = m.clone().complex_eigenvalues();
    let mut out = Vec::with_capacity(ev.len());
    for c in ev.iter() {
        if c.im.abs() > 1e-8 * scale {
            return Err(Error::InvalidArgument(format!("eigenvalue {c} is not real")));
        }
        out.push(c.re);
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Eigenvalues above `rel_tol` times the largest magnitude, ascending.
pub fn nonzero(eigs: &[f64], rel_tol: f64) -> Vec<f64> {
    let top = eigs.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    eigs.iter().copied().filter(|v| v.abs() > rel_tol * top).collect()
}
