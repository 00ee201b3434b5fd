use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LossKind, Problem};
use crate::rng::{normal_vec, stream};
use crate::tape::{ParamVector, Tensor};

use super::dense::full_matrix;
use super::operator::{CurvatureKind, CurvatureOperator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherReport {
    pub n_samples: usize,
    pub seed: u64,
    /// `max_ij |mean_s H(ŷ_s)_ij − GN_ij|`.
    pub max_abs_deviation: f64,
    /// Largest entrywise deviation in units of that entry's MC standard error.
    pub max_z: f64,
    /// `‖NME(ŷ_0)‖_F` for the first draw alone.
    pub first_draw_nme_norm: f64,
    pub gn_norm: f64,
}

/// Per-output second-derivative matrices `∇²_θ z_c`, one per output
/// coordinate `c` (sample-major, like [`CurvatureOperator::jacobian`]).
pub fn output_second_derivatives(op: &CurvatureOperator, cap: usize) -> Result<Vec<DMatrix<f64>>> {
    let p = op.params().len();
    if p > cap {
        return Err(Error::CapExceeded { params: p, cap });
    }
    let (k, n) = op.outputs().dims();
    let tape = op.tape();
    let out = op.output_node();
    (0..k * n)
        .into_par_iter()
        .map(|c| {
            let mut seed = op.outputs().full_like(0.0);
            seed.set(c % k, c / k, 1.0);
            let mut m = DMatrix::zeros(p, p);
            for j in 0..p {
                let col = tape.vjp_tangent(out, &seed, None, &ParamVector::basis(p, j))?.1;
                for (i, v) in col.as_slice().iter().enumerate() {
                    m[(i, j)] = *v;
                }
            }
            Ok(m)
        })
        .collect()
}

/// Monte-Carlo check that the Hessian averaged over model-sampled MSE labels
/// `ŷ ~ N(z, I)` equals the Gauss-Newton matrix.
///
/// For MSE the Hessian at labels `ŷ` is `GN + (1/N) Σ_c (z − ŷ)_c ∇²_θ z_c`,
/// affine in `ŷ`. The entrywise sample mean and variance of `H(ŷ_s)` over
/// draws are therefore computed exactly from the sample mean and covariance
/// of the residuals `z − ŷ_s`.
pub fn fisher_check(problem: &Problem, params: &ParamVector, n_samples: usize, seed: u64, cap: usize) -> Result<FisherReport> {
    if problem.loss != LossKind::Mse {
        return Err(Error::UnsupportedLoss(format!("fisher check needs mse, got {}", problem.loss)));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    let op = CurvatureOperator::new(CurvatureKind::GaussNewton, problem, params)?;
    let gn = full_matrix(&op, cap)?;
    let t = output_second_derivatives(&op, cap)?;
    let (k, n) = op.outputs().dims();
    let c = k * n;
    let inv_n = 1.0 / n as f64;

    let residuals: Vec<DVector<f64>> = (0..n_samples)
        .map(|s| {
            let xi = normal_vec(&mut stream(seed, s as u64), c);
            DVector::from_iterator(c, xi.into_iter().map(|v| -v))
        })
        .collect();
    let mean = residuals.iter().fold(DVector::zeros(c), |a, r| a + r) / n_samples as f64;
    let cov = if n_samples > 1 {
        residuals.iter().fold(DMatrix::zeros(c, c), |a, r| {
            let d = r - &mean;
            a + &d * d.transpose()
        }) / (n_samples - 1) as f64
    } else {
        DMatrix::zeros(c, c)
    };

    let combine = |w: &DVector<f64>| -> DMatrix<f64> {
        t.iter().zip(w.iter()).fold(DMatrix::zeros(gn.nrows(), gn.ncols()), |a, (tc, wc)| a + tc * (wc * inv_n))
    };
    let deviation = combine(&mean);
    let first_draw_nme_norm = combine(&residuals[0]).norm();

    let p = gn.nrows();
    let mut max_abs_deviation = 0.0f64;
    let mut max_z = 0.0f64;
    for i in 0..p {
        for j in 0..p {
            let coeffs = DVector::from_iterator(c, t.iter().map(|tc| tc[(i, j)] * inv_n));
            let var = (coeffs.transpose() * &cov * &coeffs)[(0, 0)].max(0.0);
            let stderr = (var / n_samples as f64).sqrt();
            let dev = deviation[(i, j)].abs();
            max_abs_deviation = max_abs_deviation.max(dev);
            let z = if dev == 0.0 {
                0.0
            } else if stderr > 0.0 {
                dev / stderr
            } else {
                f64::INFINITY
            };
            max_z = max_z.max(z);
        }
    }
    Ok(FisherReport { n_samples, seed, max_abs_deviation, max_z, first_draw_nme_norm, gn_norm: gn.norm() })
}

/// Labels `ŷ = z + ξ` for draw `s`, matching the residuals used by
/// [`fisher_check`].
pub fn sampled_regression_labels(z: &Tensor, seed: u64, s: u64) -> Tensor {
    let k = z.rows();
    let xi = normal_vec(&mut stream(seed, s), z.len());
    let mut y = z.clone();
    for (c, v) in xi.into_iter().enumerate() {
        y.set(c % k, c / k, z.get(c % k, c / k) + v);
    }
    y
}
