use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `½‖z − y‖²` per sample.
    Mse,
    /// Softmax cross-entropy on logits.
    CrossEntropy,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::CrossEntropy => "cross_entropy",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            _ => Err(Error::InvalidArgument(format!("unknown loss {s:?}"))),
        }
    }
}

/// A single sample's target.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Regression values, or a label distribution for cross-entropy.
    Dense(Vec<f64>),
    Class(usize),
}

impl Target {
    /// Dense form over `k` outputs; class indices become one-hot.
    pub fn to_dense(&self, k: usize) -> Result<Vec<f64>> {
        match self {
            Target::Dense(v) => {
                if v.len() != k {
                    return Err(Error::Shape(format!("target has {} entries, outputs have {k}", v.len())));
                }
                Ok(v.clone())
            }
            Target::Class(c) => {
                if *c >= k {
                    return Err(Error::InvalidArgument(format!("class index {c} out of range for {k} outputs")));
                }
                let mut v = vec![0.0; k];
                v[*c] = 1.0;
                Ok(v)
            }
        }
    }
}

/// Per-sample loss with its output-space gradient and Hessian.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub grad_z: Vec<f64>,
    /// `k × k` Hessian with respect to `z`.
    pub hess_z: Tensor,
}

/// Softmax of a single logit vector, stabilized by the max.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Closed-form loss, `∇_z L` and `∇²_z L` for one sample.
///
/// For cross-entropy with a dense target of total mass `m` the Hessian is
/// `m (diag(p) − p pᵀ)`, which reduces to the usual form for one-hot labels.
pub fn loss_eval(kind: LossKind, z: &[f64], y: &Target) -> Result<LossEval> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss_eval logits".into()));
    }
    let k = z.len();
    let y = y.to_dense(k)?;
    match kind {
        LossKind::Mse => {
            let grad_z: Vec<f64> = z.iter().zip(&y).map(|(a, b)| a - b).collect();
            let loss = 0.5 * grad_z.iter().map(|r| r * r).sum::<f64>();
            Ok(LossEval { loss, grad_z, hess_z: Tensor::identity(k) })
        }
        LossKind::CrossEntropy => {
            let p = softmax(z);
            let lse = log_sum_exp(z);
            let mass: f64 = y.iter().sum();
            let loss = y.iter().zip(z).map(|(yi, zi)| yi * (lse - zi)).sum();
            let grad_z = p.iter().zip(&y).map(|(pi, yi)| mass * pi - yi).collect();
            let mut h = vec![0.0; k * k];
            for i in 0..k {
                for j in 0..k {
                    let diag = if i == j { p[i] } else { 0.0 };
                    h[i * k + j] = mass * (diag - p[i] * p[j]);
                }
            }
            Ok(LossEval { loss, grad_z, hess_z: Tensor::matrix(k, k, h)? })
        }
    }
}

/// Batch-mean loss over the columns of `z` (`k × N`) against dense targets.
pub fn batch_loss(kind: LossKind, z: &Tensor, y: &Tensor) -> Result<f64> {
    check_batch(z, y)?;
    let n = z.cols();
    let mut total = 0.0;
    for j in 0..n {
        total += loss_eval(kind, z.column(j).data(), &Target::Dense(y.column(j).into_data()))?.loss;
    }
    Ok(total / n as f64)
}

/// `∇_z` of the batch-mean loss, `k × N`.
pub fn batch_grad_z(kind: LossKind, z: &Tensor, y: &Tensor) -> Result<Tensor> {
    check_batch(z, y)?;
    let (k, n) = z.dims();
    let mut out = Tensor::zeros(&[k, n]);
    for j in 0..n {
        let ev = loss_eval(kind, z.column(j).data(), &Target::Dense(y.column(j).into_data()))?;
        for i in 0..k {
            out.set(i, j, ev.grad_z[i] / n as f64);
        }
    }
    Ok(out)
}

/// Applies the batch-mean output Hessian (block diagonal over samples) to `t`.
pub fn batch_hess_z_apply(kind: LossKind, z: &Tensor, y: &Tensor, t: &Tensor) -> Result<Tensor> {
    check_batch(z, y)?;
    if t.shape() != z.shape() {
        return Err(Error::Shape(format!("direction {:?} vs outputs {:?}", t.shape(), z.shape())));
    }
    let (k, n) = z.dims();
    let mut out = Tensor::zeros(&[k, n]);
    for j in 0..n {
        let ev = loss_eval(kind, z.column(j).data(), &Target::Dense(y.column(j).into_data()))?;
        for i in 0..k {
            let s: f64 = (0..k).map(|l| ev.hess_z.get(i, l) * t.get(l, j)).sum();
            out.set(i, j, s / n as f64);
        }
    }
    Ok(out)
}

fn check_batch(z: &Tensor, y: &Tensor) -> Result<()> {
    if z.rank() != 2 || z.shape() != y.shape() {
        return Err(Error::Shape(format!("outputs {:?} vs targets {:?}", z.shape(), y.shape())));
    }
    Ok(())
}
