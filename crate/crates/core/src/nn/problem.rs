use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tape::{HvpOutput, NodeId, OverrideRegistry, ParamLayout, ParamVector, Tape, Tensor};

use super::loss::LossKind;
use super::model::{Batch, ModelSpec, RecordedForward};

/// A model architecture, a fixed batch and a loss: everything needed to
/// evaluate `L(θ)` and its derivatives for a parameter vector.
#[derive(Clone, Debug)]
pub struct Problem {
    pub spec: ModelSpec,
    pub batch: Batch,
    pub loss: LossKind,
    registry: Arc<OverrideRegistry>,
}

/// A recorded evaluation of a [`Problem`].
pub struct Recorded {
    pub tape: Tape,
    pub forward: RecordedForward,
    pub loss: NodeId,
}

impl Recorded {
    pub fn output(&self) -> NodeId {
        self.forward.output()
    }

    pub fn loss_value(&self) -> f64 {
        self.tape.value(self.loss).data()[0]
    }
}

impl Problem {
    pub fn new(spec: ModelSpec, batch: Batch, loss: LossKind) -> Result<Self> {
        spec.validate()?;
        if batch.inputs.rows() != spec.input_width() {
            return Err(Error::Shape(format!(
                "layer 0 expects input width {}, batch has {}",
                spec.input_width(),
                batch.inputs.rows()
            )));
        }
        if batch.targets.rows() != spec.output_width() {
            return Err(Error::Shape(format!(
                "output width {} does not match target width {}",
                spec.output_width(),
                batch.targets.rows()
            )));
        }
        if loss == LossKind::CrossEntropy && batch.targets.data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("cross-entropy targets must be non-negative".into()));
        }
        let registry = spec.registry();
        Ok(Self { spec, batch, loss, registry })
    }

    /// Replaces the derivative overrides implied by the activation.
    pub fn with_registry(mut self, registry: Arc<OverrideRegistry>) -> Self {
        self.registry = registry;
        self
    }

    /// Same model and loss on a different batch.
    pub fn with_batch(&self, batch: Batch) -> Result<Self> {
        Ok(Self::new(self.spec.clone(), batch, self.loss)?.with_registry(self.registry.clone()))
    }

    pub fn registry(&self) -> &Arc<OverrideRegistry> {
        &self.registry
    }

    pub fn layout(&self) -> ParamLayout {
        self.spec.layout()
    }

    pub fn num_params(&self) -> usize {
        self.spec.num_params()
    }

    pub fn record(&self, params: &ParamVector) -> Result<Recorded> {
        let mut tape = Tape::new(self.registry.clone());
        let nodes = tape.params_from(&self.layout(), params)?;
        let forward = self.spec.record(&mut tape, &nodes, &self.batch.inputs)?;
        let z = forward.output();
        let y = self.batch.targets.clone();
        let loss = match self.loss {
            LossKind::Mse => tape.mse(z, y)?,
            LossKind::CrossEntropy => tape.softmax_cross_entropy(z, y)?,
        };
        Ok(Recorded { tape, forward, loss })
    }

    pub fn loss(&self, params: &ParamVector) -> Result<f64> {
        Ok(self.record(params)?.loss_value())
    }

    pub fn outputs(&self, params: &ParamVector) -> Result<Tensor> {
        self.spec.output(params, &self.batch.inputs)
    }

    pub fn loss_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        let rec = self.record(params)?;
        let g = rec.tape.grad(rec.loss)?;
        Ok((rec.loss_value(), g))
    }

    /// Full Hessian-vector product (honoring the override registry).
    pub fn hvp(&self, params: &ParamVector, v: &ParamVector) -> Result<HvpOutput> {
        let rec = self.record(params)?;
        let (grad, hvp) = rec.tape.hvp(rec.loss, v)?;
        Ok(HvpOutput { loss: rec.loss_value(), grad, hvp })
    }
}
