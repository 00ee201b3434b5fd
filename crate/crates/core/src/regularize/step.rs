use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvature::{grad_at_labels, sample_labels, CurvatureKind, CurvatureOperator};
use crate::error::{Error, Result};
use crate::nn::{Batch, LossKind, Problem};
use crate::rng::{normal_params, stream};
use crate::tape::{softmax_columns, ParamVector};

use super::objective::Objective;

/// What one optimizer step did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Unregularized loss at the pre-step parameters.
    pub base_loss: f64,
    /// Regularizer value (see each step rule).
    pub penalty: f64,
    /// `‖∇L(θ)‖` at the pre-step parameters.
    pub grad_norm: f64,
    /// Norm of the update direction's regularizer contribution.
    pub penalty_term_norm: f64,
    /// Random probes or label draws consumed.
    pub samples_used: usize,
    pub seed: Option<u64>,
    /// Set when a normalization guard skipped the penalty or perturbation.
    pub skipped: bool,
}

impl StepReport {
    fn plain(base_loss: f64, grad: &ParamVector) -> Self {
        Self {
            base_loss,
            penalty: 0.0,
            grad_norm: grad.norm(),
            penalty_term_norm: 0.0,
            samples_used: 0,
            seed: None,
            skipped: false,
        }
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    Ok(())
}

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{name} must be non-negative, got {v}")));
    }
    Ok(())
}

fn apply(theta: &mut ParamVector, lr: f64, dir: &ParamVector) -> Result<()> {
    if !dir.is_finite() {
        return Err(Error::NonFinite("update direction".into()));
    }
    theta.axpy(-lr, dir);
    Ok(())
}

/// `θ ← θ − lr ∇L(θ)`.
pub fn sgd_step<O: Objective + ?Sized>(obj: &O, theta: &mut ParamVector, lr: f64) -> Result<StepReport> {
    check_lr(lr)?;
    let (loss, g) = obj.loss_and_grad(theta)?;
    apply(theta, lr, &g)?;
    Ok(StepReport::plain(loss, &g))
}

/// Gradient penalty `ρ‖∇L‖^p` for `p ∈ {1, 2}`.
///
/// The update is `g + ρ H g / ‖g‖` for `p = 1` and `g + 2ρ H g` for `p = 2`.
/// With `p = 1` and `‖g‖ < eps` the penalty term is skipped and flagged.
pub fn grad_penalty_step<O: Objective + ?Sized>(
    obj: &O,
    theta: &mut ParamVector,
    lr: f64,
    rho: f64,
    p: u8,
    eps: f64,
) -> Result<StepReport> {
    check_lr(lr)?;
    check_nonneg("rho", rho)?;
    if p != 1 && p != 2 {
        return Err(Error::InvalidArgument(format!("gradient penalty power must be 1 or 2, got {p}")));
    }
    let (loss, g) = obj.loss_and_grad(theta)?;
    let mut report = StepReport::plain(loss, &g);
    if rho == 0.0 {
        apply(theta, lr, &g)?;
        return Ok(report);
    }
    let gn = g.norm();
    if p == 1 && gn < eps {
        report.skipped = true;
        apply(theta, lr, &g)?;
        return Ok(report);
    }
    let hg = obj.hvp(theta, &g)?.hvp;
    let coef = if p == 1 { rho / gn } else { 2.0 * rho };
    let term = hg.scaled(coef);
    report.penalty = if p == 1 { rho * gn } else { rho * gn * gn };
    report.penalty_term_norm = term.norm();
    let mut dir = g;
    dir.axpy(1.0, &term);
    apply(theta, lr, &dir)?;
    Ok(report)
}

/// Gradient at `θ + ε`, `ε ~ N(0, σ² I)`, applied at `θ`.
///
/// The reported penalty is the single-probe trace diagnostic `εᵀ H ε`
/// (`σ²` times a Hutchinson probe); it does not enter the update.
pub fn weight_noise_step<O: Objective + ?Sized>(
    obj: &O,
    theta: &mut ParamVector,
    lr: f64,
    sigma2: f64,
    seed: u64,
) -> Result<StepReport> {
    check_lr(lr)?;
    check_nonneg("sigma2", sigma2)?;
    if sigma2 == 0.0 {
        let mut r = sgd_step(obj, theta, lr)?;
        r.seed = Some(seed);
        return Ok(r);
    }
    let eps = normal_params(&mut stream(seed, 0), theta.len()).scaled(sigma2.sqrt());
    let at = obj.hvp(theta, &eps)?;
    let (_, g_noisy) = obj.loss_and_grad(&theta.plus(1.0, &eps))?;
    let mut report = StepReport::plain(at.loss, &at.grad);
    report.penalty = eps.dot(&at.hvp);
    report.penalty_term_norm = g_noisy.plus(-1.0, &at.grad).norm();
    report.samples_used = 1;
    report.seed = Some(seed);
    apply(theta, lr, &g_noisy)?;
    Ok(report)
}

/// `∇_θ (εᵀ H(θ) ε)` as a central difference of exact HVPs along `ε`.
///
/// The tape stops at second order, so the third-derivative contraction is
/// taken as `(H(θ+hε)ε − H(θ−hε)ε) / 2h`.
pub fn quadratic_form_gradient<O: Objective + ?Sized>(obj: &O, theta: &ParamVector, eps: &ParamVector) -> Result<ParamVector> {
    let en = eps.norm();
    if en == 0.0 {
        return Ok(ParamVector::zeros(theta.len()));
    }
    let h = f64::EPSILON.cbrt() * (1.0 + theta.norm()) / en;
    let plus = obj.hvp(&theta.plus(h, eps), eps)?.hvp;
    let minus = obj.hvp(&theta.plus(-h, eps), eps)?.hvp;
    let mut d = plus;
    d.axpy(-1.0, &minus);
    Ok(d.scaled(0.5 / h))
}

/// `L + σ² (1/n) Σ εᵢᵀ H εᵢ` with fixed standard-normal probes `εᵢ`.
pub fn hessian_trace_penalty_step<O: Objective + ?Sized>(
    obj: &O,
    theta: &mut ParamVector,
    lr: f64,
    sigma2: f64,
    n_samples: usize,
    seed: u64,
) -> Result<StepReport> {
    check_lr(lr)?;
    check_nonneg("sigma2", sigma2)?;
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    if sigma2 == 0.0 {
        let mut r = sgd_step(obj, theta, lr)?;
        r.seed = Some(seed);
        return Ok(r);
    }
    let (loss, g) = obj.loss_and_grad(theta)?;
    let per_probe = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let eps = normal_params(&mut stream(seed, i as u64), theta.len());
            let quad = eps.dot(&obj.hvp(theta, &eps)?.hvp);
            Ok((quad, quadratic_form_gradient(obj, theta, &eps)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = sigma2 / n_samples as f64;
    let mut term = ParamVector::zeros(theta.len());
    let mut penalty = 0.0;
    for (q, d) in &per_probe {
        penalty += scale * q;
        term.axpy(scale, d);
    }
    let mut report = StepReport::plain(loss, &g);
    report.penalty = penalty;
    report.penalty_term_norm = term.norm();
    report.samples_used = n_samples;
    report.seed = Some(seed);
    let mut dir = g;
    dir.axpy(1.0, &term);
    apply(theta, lr, &dir)?;
    Ok(report)
}

/// `L + σ² (1/n) Σ_s N ‖∇_θ L(θ, ŷ_s)‖²` with labels `ŷ_s` drawn from the
/// model's softmax.
///
/// Labels are constants of the penalty, so each draw contributes
/// `2N H(θ; ŷ_s) ∇L(θ, ŷ_s)`. With `straight_through` the label gradient is
/// passed through the sampling, which cancels the Gauss-Newton part and
/// leaves `2N (∇_z L(θ, ŷ_s) · ∇²_θ z) ∇L(θ, ŷ_s)`.
pub fn gn_trace_penalty_step(
    problem: &Problem,
    theta: &mut ParamVector,
    lr: f64,
    sigma2: f64,
    n_samples: usize,
    seed: u64,
    straight_through: bool,
) -> Result<StepReport> {
    check_lr(lr)?;
    check_nonneg("sigma2", sigma2)?;
    if problem.loss != LossKind::CrossEntropy {
        return Err(Error::UnsupportedLoss(format!("gn_trace penalty needs cross_entropy, got {}", problem.loss)));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    if sigma2 == 0.0 {
        let mut r = sgd_step(problem, theta, lr)?;
        r.seed = Some(seed);
        return Ok(r);
    }
    let (term, penalty, loss, g) = gn_trace_penalty_gradient(problem, theta, n_samples, seed, straight_through)?;
    let term = term.scaled(sigma2);
    let mut report = StepReport::plain(loss, &g);
    report.penalty = sigma2 * penalty;
    report.penalty_term_norm = term.norm();
    report.samples_used = n_samples;
    report.seed = Some(seed);
    let mut dir = g;
    dir.axpy(1.0, &term);
    apply(theta, lr, &dir)?;
    Ok(report)
}

/// Penalty gradient and value (both without `σ²`), plus the base loss and
/// gradient at `theta`.
pub fn gn_trace_penalty_gradient(
    problem: &Problem,
    theta: &ParamVector,
    n_samples: usize,
    seed: u64,
    straight_through: bool,
) -> Result<(ParamVector, f64, f64, ParamVector)> {
    let op = CurvatureOperator::new(CurvatureKind::Hessian, problem, theta)?;
    let g = op.grad()?;
    let probs = softmax_columns(op.outputs());
    let n = probs.cols() as f64;
    let draws = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let y = sample_labels(&probs, &mut stream(seed, s as u64));
            let gs = grad_at_labels(&op, &probs, &y)?;
            let hv = if straight_through {
                let c = probs.zip_map(&y, |p, t| (p - t) / n);
                op.tape().vjp_tangent(op.output_node(), &c, None, &gs)?.1
            } else {
                let at_labels = problem.with_batch(Batch::new(problem.batch.inputs.clone(), y)?)?;
                at_labels.hvp(theta, &gs)?.hvp
            };
            Ok((n * gs.dot(&gs), hv.scaled(2.0 * n)))
        })
        .collect::<Result<Vec<_>>>()?;
    let inv = 1.0 / n_samples as f64;
    let mut term = ParamVector::zeros(theta.len());
    let mut penalty = 0.0;
    for (v, d) in &draws {
        penalty += inv * v;
        term.axpy(inv, d);
    }
    Ok((term, penalty, op.loss(), g))
}

/// SAM (`normalized`) or USAM: gradient at `θ + ρ g/‖g‖` or `θ + ρ g`,
/// applied at `θ`. The penalty reported is `L(θ̃) − L(θ)`.
pub fn sam_step<O: Objective + ?Sized>(
    obj: &O,
    theta: &mut ParamVector,
    lr: f64,
    rho: f64,
    normalized: bool,
    eps: f64,
) -> Result<StepReport> {
    check_lr(lr)?;
    check_nonneg("rho", rho)?;
    let (loss, g) = obj.loss_and_grad(theta)?;
    let mut report = StepReport::plain(loss, &g);
    let gn = g.norm();
    let step = if normalized {
        if gn < eps {
            report.skipped = true;
            0.0
        } else {
            rho / gn
        }
    } else {
        rho
    };
    let (loss2, g2) = obj.loss_and_grad(&theta.plus(step, &g))?;
    report.penalty = loss2 - loss;
    report.penalty_term_norm = g2.plus(-1.0, &g).norm();
    apply(theta, lr, &g2)?;
    Ok(report)
}
