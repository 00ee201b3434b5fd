use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{gaussian_bump, DerivativeOverride, OverrideRegistry, Primitive, PrimitiveId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Gelu,
    BetaGelu,
    /// ReLU whose AD second derivative is a Gaussian bump of width `1/beta`.
    AugmentedRelu,
    /// GELU whose AD second derivative is zero.
    DiminishedGelu,
    Tanh,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 6] = [
        ActivationKind::Relu,
        ActivationKind::Gelu,
        ActivationKind::BetaGelu,
        ActivationKind::AugmentedRelu,
        ActivationKind::DiminishedGelu,
        ActivationKind::Tanh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Gelu => "gelu",
            ActivationKind::BetaGelu => "beta_gelu",
            ActivationKind::AugmentedRelu => "augmented_relu",
            ActivationKind::DiminishedGelu => "diminished_gelu",
            ActivationKind::Tanh => "tanh",
        }
    }

    /// Whether `beta` changes anything for this kind.
    pub fn uses_beta(self) -> bool {
        matches!(self, ActivationKind::BetaGelu | ActivationKind::AugmentedRelu)
    }
}

fn default_beta() -> f64 {
    1.0
}

/// An activation with its AD derivative definitions.
///
/// `value`, `first` and `second` return what the differentiation sweeps see,
/// so the augmented and diminished variants report their overridden second
/// derivatives rather than the true ones.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationSpec {
    pub kind: ActivationKind,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

impl ActivationSpec {
    pub fn new(kind: ActivationKind, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be positive and finite, got {beta}")));
        }
        Ok(Self { kind, beta })
    }

    pub fn relu() -> Self {
        Self { kind: ActivationKind::Relu, beta: 1.0 }
    }

    pub fn gelu() -> Self {
        Self { kind: ActivationKind::Gelu, beta: 1.0 }
    }

    pub fn tanh() -> Self {
        Self { kind: ActivationKind::Tanh, beta: 1.0 }
    }

    pub fn diminished_gelu() -> Self {
        Self { kind: ActivationKind::DiminishedGelu, beta: 1.0 }
    }

    pub fn beta_gelu(beta: f64) -> Result<Self> {
        Self::new(ActivationKind::BetaGelu, beta)
    }

    pub fn augmented_relu(beta: f64) -> Result<Self> {
        Self::new(ActivationKind::AugmentedRelu, beta)
    }

    /// The tape primitive evaluated in the forward pass.
    pub fn primitive(&self) -> Primitive {
        match self.kind {
            ActivationKind::Relu | ActivationKind::AugmentedRelu => Primitive::relu(),
            ActivationKind::Gelu | ActivationKind::DiminishedGelu => Primitive::gelu(),
            ActivationKind::BetaGelu => Primitive::beta_gelu(self.beta),
            ActivationKind::Tanh => Primitive::tanh(),
        }
    }

    /// Derivative overrides this activation installs on the tape.
    pub fn overrides(&self) -> Vec<DerivativeOverride> {
        match self.kind {
            ActivationKind::AugmentedRelu => {
                let beta = self.beta;
                vec![DerivativeOverride::new(PrimitiveId::Relu, 2, move |x| gaussian_bump(x, beta))]
            }
            ActivationKind::DiminishedGelu => {
                vec![DerivativeOverride::new(PrimitiveId::Gelu, 2, |_| 0.0)]
            }
            _ => vec![],
        }
    }

    pub fn registry(&self) -> Arc<OverrideRegistry> {
        let mut reg = OverrideRegistry::new();
        for ov in self.overrides() {
            reg.register(ov).expect("activation overrides are distinct");
        }
        Arc::new(reg)
    }

    pub fn value(&self, x: f64) -> f64 {
        self.primitive().value(x)
    }

    pub fn first(&self, x: f64) -> f64 {
        self.primitive().first(x)
    }

    pub fn second(&self, x: f64) -> f64 {
        match self.kind {
            ActivationKind::AugmentedRelu => gaussian_bump(x, self.beta),
            ActivationKind::DiminishedGelu => 0.0,
            _ => self.primitive().second(x),
        }
    }
}

impl fmt::Display for ActivationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.kind.uses_beta() {
            write!(f, "{}:{}", self.kind.name(), self.beta)
        } else {
            f.write_str(self.kind.name())
        }
    }
}

impl FromStr for ActivationSpec {
    type Err = Error;

    /// Parses `name` or `name:beta`, e.g. `beta_gelu:8`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, beta) = match s.split_once(':') {
            Some((n, b)) => (
                n,
                b.parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("bad beta in {s:?}")))?,
            ),
            None => (s, 1.0),
        };
        let kind = ActivationKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown activation {name:?}")))?;
        Self::new(kind, beta)
    }
}

/// Value (order 0), first (1) or second (2) AD derivative of `spec` at `x`.
pub fn activation_eval(spec: &ActivationSpec, x: f64, order: u8) -> Result<f64> {
    match order {
        0 => Ok(spec.value(x)),
        1 => Ok(spec.first(x)),
        2 => Ok(spec.second(x)),
        _ => Err(Error::InvalidArgument(format!("derivative order {order} is not supported"))),
    }
}
