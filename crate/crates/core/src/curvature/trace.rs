use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LossKind, Problem};
use crate::rng::{categorical, normal_params, stream};
use crate::tape::{softmax_columns, ParamVector, Tensor};

use super::operator::{CurvatureKind, CurvatureOperator, LinearOperator};

/// Monte-Carlo trace estimate with its standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub estimate: f64,
    /// Sample standard deviation over `sqrt(n)`; NaN for a single sample.
    pub stderr: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl TraceEstimate {
    pub fn from_samples(samples: &[f64], seed: u64) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            f64::NAN
        };
        Self { estimate: mean, stderr, n_samples: n, seed }
    }
}

fn check_samples(n_samples: usize) -> Result<()> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    Ok(())
}

/// Per-probe values `εᵢᵀ A εᵢ` with `εᵢ ~ N(0, I)` drawn from stream `i`.
pub fn hutchinson_samples<O: LinearOperator + ?Sized>(op: &O, n_samples: usize, seed: u64) -> Result<Vec<f64>> {
    check_samples(n_samples)?;
    let dim = op.dim();
    (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let eps = normal_params(&mut stream(seed, i as u64), dim);
            Ok(eps.dot(&op.apply(&eps)?))
        })
        .collect()
}

pub fn hutchinson_trace<O: LinearOperator + ?Sized>(op: &O, n_samples: usize, seed: u64) -> Result<TraceEstimate> {
    Ok(TraceEstimate::from_samples(&hutchinson_samples(op, n_samples, seed)?, seed))
}

/// One-hot labels drawn column-wise from `Cat(p)`.
pub fn sample_labels(probs: &Tensor, rng: &mut impl Rng) -> Tensor {
    let (k, n) = probs.dims();
    let mut y = Tensor::zeros(&[k, n]);
    for j in 0..n {
        let col = probs.column(j);
        y.set(categorical(rng, col.data()), j, 1.0);
    }
    y
}

/// Gradient of the batch-mean cross-entropy at labels `y`, reusing the
/// recorded forward pass of `op`.
pub(crate) fn grad_at_labels(op: &CurvatureOperator, probs: &Tensor, y: &Tensor) -> Result<ParamVector> {
    let n = probs.cols() as f64;
    let c = probs.zip_map(y, |p, t| (p - t) / n);
    op.vjp(&c)
}

/// Sampled-label estimate of `tr(GN)` for cross-entropy.
///
/// Each probe draws one label per batch column from the model's own
/// softmax and takes `N ‖∇_θ L(θ, ŷ)‖²` for the batch-mean gradient. The
/// per-sample label gradients have zero mean, so cross terms vanish in
/// expectation and the probe is unbiased for the batch-mean GN trace.
pub fn gn_trace_sampled(problem: &Problem, params: &ParamVector, n_samples: usize, seed: u64) -> Result<TraceEstimate> {
    Ok(TraceEstimate::from_samples(&gn_trace_samples(problem, params, n_samples, seed)?, seed))
}

pub fn gn_trace_samples(problem: &Problem, params: &ParamVector, n_samples: usize, seed: u64) -> Result<Vec<f64>> {
    check_samples(n_samples)?;
    if problem.loss != LossKind::CrossEntropy {
        return Err(Error::UnsupportedLoss(format!(
            "sampled-label GN trace needs cross_entropy, got {}",
            problem.loss
        )));
    }
    let op = CurvatureOperator::new(CurvatureKind::GaussNewton, problem, params)?;
    let probs = softmax_columns(op.outputs());
    let n = probs.cols() as f64;
    (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let y = sample_labels(&probs, &mut stream(seed, i as u64));
            let g = grad_at_labels(&op, &probs, &y)?;
            Ok(n * g.dot(&g))
        })
        .collect()
}
