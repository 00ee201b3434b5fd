//! Registry of custom AD derivatives for elementwise primitives.
//!
//! An override of order `k` for a primitive replaces the true `k`-th
//! derivative wherever the differentiation sweeps would evaluate it: order 1
//! in tangent propagation and in the reverse sweep, order 2 in the tangent of
//! the reverse sweep (the HVP path). Values are never affected.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::primitive::{Primitive, PrimitiveId};

pub type Replacement = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct DerivativeOverride {
    pub primitive: PrimitiveId,
    pub order: u8,
    pub replacement: Replacement,
}

impl DerivativeOverride {
    pub fn new(
        primitive: PrimitiveId,
        order: u8,
        replacement: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { primitive, order, replacement: Arc::new(replacement) }
    }
}

impl fmt::Debug for DerivativeOverride {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DerivativeOverride")
            .field("primitive", &self.primitive)
            .field("order", &self.order)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Default)]
pub struct OverrideRegistry {
    entries: BTreeMap<(PrimitiveId, u8), Replacement>,
}

impl fmt::Debug for OverrideRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.entries.keys()).finish()
    }
}

impl OverrideRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    fn check_order(order: u8) -> Result<()> {
        if order == 1 || order == 2 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("override order must be 1 or 2, got {order}")))
        }
    }

    pub fn register(&mut self, ov: DerivativeOverride) -> Result<()> {
        Self::check_order(ov.order)?;
        let key = (ov.primitive, ov.order);
        if self.entries.contains_key(&key) {
            return Err(Error::DuplicateOverride { primitive: ov.primitive, order: ov.order });
        }
        self.entries.insert(key, ov.replacement);
        Ok(())
    }

    /// Installs `ov`, returning whatever it displaced.
    pub fn replace(&mut self, ov: DerivativeOverride) -> Result<Option<Replacement>> {
        Self::check_order(ov.order)?;
        Ok(self.entries.insert((ov.primitive, ov.order), ov.replacement))
    }

    pub fn get(&self, primitive: PrimitiveId, order: u8) -> Option<&Replacement> {
        self.entries.get(&(primitive, order))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Effective AD first derivative.
    pub fn first(&self, p: &Primitive, x: f64) -> f64 {
        match self.get(p.id, 1) {
            Some(g) => g(x),
            None => p.first(x),
        }
    }

    /// Effective AD second derivative.
    ///
    /// With only an order-1 override `g` installed this is `g'`, taken by a
    /// central difference since `g` is an opaque closure.
    pub fn second(&self, p: &Primitive, x: f64) -> f64 {
        if let Some(g2) = self.get(p.id, 2) {
            return g2(x);
        }
        match self.get(p.id, 1) {
            Some(g) => {
                let h = f64::EPSILON.cbrt() * x.abs().max(1.0);
                (g(x + h) - g(x - h)) / (2.0 * h)
            }
            None => p.second(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_registration_is_rejected() {
        let mut reg = OverrideRegistry::new();
        reg.register(DerivativeOverride::new(PrimitiveId::Gelu, 2, |_| 0.0)).unwrap();
        let err = reg.register(DerivativeOverride::new(PrimitiveId::Gelu, 2, |_| 1.0));
        assert!(matches!(err, Err(Error::DuplicateOverride { order: 2, .. })));
        let old = reg.replace(DerivativeOverride::new(PrimitiveId::Gelu, 2, |_| 1.0)).unwrap();
        assert!(old.is_some());
        assert_eq!(reg.second(&Primitive::gelu(), 0.3), 1.0);
    }

    #[test]
    fn order_must_be_one_or_two() {
        let mut reg = OverrideRegistry::new();
        for order in [0, 3] {
            assert!(reg.register(DerivativeOverride::new(PrimitiveId::Relu, order, |_| 0.0)).is_err());
        }
    }

    #[test]
    fn first_order_override_feeds_second_by_difference() {
        let mut reg = OverrideRegistry::new();
        reg.register(DerivativeOverride::new(PrimitiveId::Tanh, 1, |x| x * x)).unwrap();
        let p = Primitive::tanh();
        assert_eq!(reg.first(&p, 3.0), 9.0);
        assert!((reg.second(&p, 3.0) - 6.0).abs() < 1e-8);
        assert_eq!(p.value(3.0), 3f64.tanh());
    }
}
