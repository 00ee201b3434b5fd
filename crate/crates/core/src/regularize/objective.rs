use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::Result;
use crate::nn::Problem;
use crate::tape::{record, HvpOutput, NodeId, OverrideRegistry, ParamLayout, ParamVector, Tape};

/// A twice-differentiable scalar objective over a flat parameter vector.
pub trait Objective: Sync {
    fn num_params(&self) -> usize;

    fn loss_and_grad(&self, theta: &ParamVector) -> Result<(f64, ParamVector)>;

    /// Loss, gradient and `H v` at `theta`.
    fn hvp(&self, theta: &ParamVector, v: &ParamVector) -> Result<HvpOutput>;

    fn loss(&self, theta: &ParamVector) -> Result<f64> {
        Ok(self.loss_and_grad(theta)?.0)
    }
}

impl Objective for Problem {
    fn num_params(&self) -> usize {
        Problem::num_params(self)
    }

    fn loss_and_grad(&self, theta: &ParamVector) -> Result<(f64, ParamVector)> {
        Problem::loss_and_grad(self, theta)
    }

    fn hvp(&self, theta: &ParamVector, v: &ParamVector) -> Result<HvpOutput> {
        Problem::hvp(self, theta, v)
    }

    fn loss(&self, theta: &ParamVector) -> Result<f64> {
        Problem::loss(self, theta)
    }
}

type LossFn = dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId> + Send + Sync;

/// An objective given as a tape-recording closure.
#[derive(Clone)]
pub struct TapeObjective {
    layout: ParamLayout,
    overrides: Arc<OverrideRegistry>,
    f: Arc<LossFn>,
}

impl TapeObjective {
    pub fn new(layout: ParamLayout, f: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId> + Send + Sync + 'static) -> Self {
        Self { layout, overrides: Arc::default(), f: Arc::new(f) }
    }

    pub fn with_overrides(mut self, overrides: Arc<OverrideRegistry>) -> Self {
        self.overrides = overrides;
        self
    }

    /// `½ θᵀ H θ` for a dense row-major `H` of size `n × n`.
    pub fn quadratic(h: Vec<f64>, n: usize) -> Self {
        use crate::tape::Tensor;
        let hm = Tensor::matrix(n, n, h).expect("square quadratic matrix");
        Self::new(ParamLayout::flat(n), move |t, ps| {
            let c = t.constant(hm.clone());
            let hv = t.matmul(c, ps[0])?;
            let d = t.dot(ps[0], hv)?;
            t.scale(d, 0.5)
        })
    }

    fn recorded(&self, theta: &ParamVector) -> Result<(Tape, NodeId)> {
        let f = self.f.clone();
        record(move |t, ps| f(t, ps), &self.layout, theta, self.overrides.clone())
    }
}

impl Objective for TapeObjective {
    fn num_params(&self) -> usize {
        self.layout.num_params()
    }

    fn loss_and_grad(&self, theta: &ParamVector) -> Result<(f64, ParamVector)> {
        let (tape, loss) = self.recorded(theta)?;
        let g = tape.grad(loss)?;
        Ok((tape.value(loss).item()?, g))
    }

    fn hvp(&self, theta: &ParamVector, v: &ParamVector) -> Result<HvpOutput> {
        let (tape, loss) = self.recorded(theta)?;
        let (grad, hvp) = tape.hvp(loss, v)?;
        Ok(HvpOutput { loss: tape.value(loss).item()?, grad, hvp })
    }
}

/// Wraps an objective and counts gradient and HVP evaluations.
pub struct Counting<O> {
    pub inner: O,
    grads: AtomicUsize,
    hvps: AtomicUsize,
}

impl<O> Counting<O> {
    pub fn new(inner: O) -> Self {
        Self { inner, grads: AtomicUsize::new(0), hvps: AtomicUsize::new(0) }
    }

    pub fn grad_evals(&self) -> usize {
        self.grads.load(Ordering::Relaxed)
    }

    pub fn hvp_evals(&self) -> usize {
        self.hvps.load(Ordering::Relaxed)
    }
}

impl<O: Objective> Objective for Counting<O> {
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn loss_and_grad(&self, theta: &ParamVector) -> Result<(f64, ParamVector)> {
        self.grads.fetch_add(1, Ordering::Relaxed);
        self.inner.loss_and_grad(theta)
    }

    fn hvp(&self, theta: &ParamVector, v: &ParamVector) -> Result<HvpOutput> {
        self.hvps.fetch_add(1, Ordering::Relaxed);
        self.inner.hvp(theta, v)
    }

    fn loss(&self, theta: &ParamVector) -> Result<f64> {
        self.inner.loss(theta)
    }
}
