//! Training-step rules: SGD, gradient penalties, weight noise, trace
//! penalties and the SAM family.

mod objective;
mod step;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Problem;
use crate::tape::ParamVector;

pub use objective::{Counting, Objective, TapeObjective};
pub use step::{
    gn_trace_penalty_gradient, gn_trace_penalty_step, grad_penalty_step, hessian_trace_penalty_step,
    quadratic_form_gradient, sam_step, sgd_step, weight_noise_step, StepReport,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    #[default]
    None,
    GradPenaltyP1,
    GradPenaltyP2,
    WeightNoise,
    HessianTrace,
    GnTrace,
    Sam,
    Usam,
}

impl RegularizerKind {
    pub const ALL: [RegularizerKind; 8] = [
        RegularizerKind::None,
        RegularizerKind::GradPenaltyP1,
        RegularizerKind::GradPenaltyP2,
        RegularizerKind::WeightNoise,
        RegularizerKind::HessianTrace,
        RegularizerKind::GnTrace,
        RegularizerKind::Sam,
        RegularizerKind::Usam,
    ];
}

fn one() -> usize {
    1
}

fn default_eps() -> f64 {
    1e-12
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    #[serde(default)]
    pub kind: RegularizerKind,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub sigma2: f64,
    #[serde(default = "one")]
    pub n_estimator_samples: usize,
    #[serde(default = "default_eps")]
    pub grad_norm_epsilon: f64,
    #[serde(default)]
    pub straight_through: bool,
}

impl Default for RegularizerSpec {
    fn default() -> Self {
        Self {
            kind: RegularizerKind::None,
            rho: 0.0,
            sigma2: 0.0,
            n_estimator_samples: 1,
            grad_norm_epsilon: default_eps(),
            straight_through: false,
        }
    }
}

impl RegularizerSpec {
    pub fn new(kind: RegularizerKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn with_sigma2(mut self, sigma2: f64) -> Self {
        self.sigma2 = sigma2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rho", self.rho), ("sigma2", self.sigma2), ("grad_norm_epsilon", self.grad_norm_epsilon)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.n_estimator_samples == 0 {
            return Err(Error::InvalidArgument("n_estimator_samples must be at least 1".into()));
        }
        Ok(())
    }

    /// One optimizer step on `problem` at `theta`; `seed` keys any sampling.
    pub fn step(&self, problem: &Problem, theta: &mut ParamVector, lr: f64, seed: u64) -> Result<StepReport> {
        self.validate()?;
        let eps = self.grad_norm_epsilon;
        let n = self.n_estimator_samples;
        match self.kind {
            RegularizerKind::None => sgd_step(problem, theta, lr),
            RegularizerKind::GradPenaltyP1 => grad_penalty_step(problem, theta, lr, self.rho, 1, eps),
            RegularizerKind::GradPenaltyP2 => grad_penalty_step(problem, theta, lr, self.rho, 2, eps),
            RegularizerKind::WeightNoise => weight_noise_step(problem, theta, lr, self.sigma2, seed),
            RegularizerKind::HessianTrace => hessian_trace_penalty_step(problem, theta, lr, self.sigma2, n, seed),
            RegularizerKind::GnTrace => {
                gn_trace_penalty_step(problem, theta, lr, self.sigma2, n, seed, self.straight_through)
            }
            RegularizerKind::Sam => sam_step(problem, theta, lr, self.rho, true, eps),
            RegularizerKind::Usam => sam_step(problem, theta, lr, self.rho, false, eps),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr₀ · ½ (1 + cos(π t / T))`.
    Cosine,
}

impl LrSchedule {
    pub fn lr(self, lr0: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr0,
            LrSchedule::Cosine => {
                let frac = if total == 0 { 0.0 } else { step as f64 / total as f64 };
                lr0 * 0.5 * (1.0 + (PI * frac).cos())
            }
        }
    }
}
