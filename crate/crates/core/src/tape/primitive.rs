//! Elementwise primitives with their true first and second derivatives.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use serde::{Deserialize, Serialize};

/// Identifies an elementwise primitive for derivative overrides.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveId {
    Relu,
    Gelu,
    BetaGelu,
    Tanh,
}

/// A primitive together with its sharpness parameter (ignored by relu/tanh,
/// fixed to 1 for gelu).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub id: PrimitiveId,
    pub beta: f64,
}

impl Primitive {
    pub fn relu() -> Self {
        Self { id: PrimitiveId::Relu, beta: 1.0 }
    }

    pub fn gelu() -> Self {
        Self { id: PrimitiveId::Gelu, beta: 1.0 }
    }

    pub fn beta_gelu(beta: f64) -> Self {
        Self { id: PrimitiveId::BetaGelu, beta }
    }

    pub fn tanh() -> Self {
        Self { id: PrimitiveId::Tanh, beta: 1.0 }
    }

    pub fn value(&self, x: f64) -> f64 {
        match self.id {
            PrimitiveId::Relu => relu(x),
            PrimitiveId::Gelu => beta_gelu(x, 1.0),
            PrimitiveId::BetaGelu => beta_gelu(x, self.beta),
            PrimitiveId::Tanh => x.tanh(),
        }
    }

    pub fn first(&self, x: f64) -> f64 {
        match self.id {
            PrimitiveId::Relu => heaviside(x),
            PrimitiveId::Gelu => beta_gelu_d1(x, 1.0),
            PrimitiveId::BetaGelu => beta_gelu_d1(x, self.beta),
            PrimitiveId::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn second(&self, x: f64) -> f64 {
        match self.id {
            PrimitiveId::Relu => 0.0,
            PrimitiveId::Gelu => beta_gelu_d2(x, 1.0),
            PrimitiveId::BetaGelu => beta_gelu_d2(x, self.beta),
            PrimitiveId::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF via `erfc` (absolute error well below 1e-12).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Heaviside step with the implementation convention `H(0) = 0`.
pub fn heaviside(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `x * Phi(beta * x)`.
pub fn beta_gelu(x: f64, beta: f64) -> f64 {
    x * normal_cdf(beta * x)
}

pub fn beta_gelu_d1(x: f64, beta: f64) -> f64 {
    let u = beta * x;
    normal_cdf(u) + u * normal_pdf(u)
}

/// `beta * pdf(beta x) * (2 - beta^2 x^2)`.
pub fn beta_gelu_d2(x: f64, beta: f64) -> f64 {
    let u = beta * x;
    beta * normal_pdf(u) * (2.0 - u * u)
}

/// Gaussian bump of width `1/beta` integrating to one; the mollified Dirac
/// delta used as the augmented-ReLU second derivative.
pub fn gaussian_bump(x: f64, beta: f64) -> f64 {
    beta / (2.0 * PI).sqrt() * (-0.5 * beta * beta * x * x).exp()
}
