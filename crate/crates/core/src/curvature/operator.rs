use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{batch_grad_z, batch_hess_z_apply, Problem, Recorded};
use crate::tape::{record, NodeId, ParamLayout, ParamVector, Tape, Tensor};

/// A symmetric linear map on parameter space.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &ParamVector) -> Result<ParamVector>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureKind {
    Hessian,
    GaussNewton,
    Nme,
}

/// How the NME product is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmeMethod {
    /// Reverse sweep seeded with `∇_z L`, held fixed, differentiated along `v`.
    #[default]
    Direct,
    /// `hvp(v) − gnvp(v)`.
    Difference,
}

/// Hessian, Gauss-Newton or NME of a [`Problem`] at a fixed parameter
/// snapshot. The forward pass is recorded once; every `apply` reuses it.
pub struct CurvatureOperator {
    kind: CurvatureKind,
    nme_method: NmeMethod,
    problem: Problem,
    params: ParamVector,
    rec: Recorded,
    grad_z: Tensor,
}

impl CurvatureOperator {
    pub fn new(kind: CurvatureKind, problem: &Problem, params: &ParamVector) -> Result<Self> {
        let rec = problem.record(params)?;
        let z = rec.tape.value(rec.output());
        let grad_z = batch_grad_z(problem.loss, z, &problem.batch.targets)?;
        Ok(Self {
            kind,
            nme_method: NmeMethod::Direct,
            problem: problem.clone(),
            params: params.clone(),
            rec,
            grad_z,
        })
    }

    pub fn with_nme_method(mut self, method: NmeMethod) -> Self {
        self.nme_method = method;
        self
    }

    pub fn kind(&self) -> CurvatureKind {
        self.kind
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn loss(&self) -> f64 {
        self.rec.loss_value()
    }

    pub fn tape(&self) -> &Tape {
        &self.rec.tape
    }

    pub fn output_node(&self) -> NodeId {
        self.rec.output()
    }

    /// Model outputs `z`, `k × N`.
    pub fn outputs(&self) -> &Tensor {
        self.rec.tape.value(self.rec.output())
    }

    /// `∇_z L` of the batch-mean loss.
    pub fn grad_z(&self) -> &Tensor {
        &self.grad_z
    }

    pub fn grad(&self) -> Result<ParamVector> {
        self.rec.tape.grad(self.rec.loss)
    }

    pub fn jvp(&self, v: &ParamVector) -> Result<Tensor> {
        self.rec.tape.jvp(self.rec.output(), v)
    }

    pub fn vjp(&self, c: &Tensor) -> Result<ParamVector> {
        self.rec.tape.vjp(self.rec.output(), c)
    }

    pub fn hvp(&self, v: &ParamVector) -> Result<ParamVector> {
        Ok(self.rec.tape.hvp(self.rec.loss, v)?.1)
    }

    /// `Jᵀ H_z J v`; only first derivatives of the model are evaluated.
    pub fn gnvp(&self, v: &ParamVector) -> Result<ParamVector> {
        let jv = self.jvp(v)?;
        let hz = batch_hess_z_apply(self.problem.loss, self.outputs(), &self.problem.batch.targets, &jv)?;
        self.vjp(&hz)
    }

    pub fn nmevp_direct(&self, v: &ParamVector) -> Result<ParamVector> {
        Ok(self.rec.tape.vjp_tangent(self.rec.output(), &self.grad_z, None, v)?.1)
    }

    pub fn nmevp_difference(&self, v: &ParamVector) -> Result<ParamVector> {
        let mut h = self.hvp(v)?;
        h.axpy(-1.0, &self.gnvp(v)?);
        Ok(h)
    }

    pub fn nmevp(&self, v: &ParamVector) -> Result<ParamVector> {
        match self.nme_method {
            NmeMethod::Direct => self.nmevp_direct(v),
            NmeMethod::Difference => self.nmevp_difference(v),
        }
    }

    /// Dense Jacobian `∂z/∂θ`, one row per output coordinate with rows
    /// ordered sample-major (`n * k + i`).
    pub fn jacobian(&self) -> Result<DMatrix<f64>> {
        let (k, n) = self.outputs().dims();
        let p = self.dim();
        let mut jac = DMatrix::zeros(k * n, p);
        for s in 0..n {
            for i in 0..k {
                let mut c = self.outputs().full_like(0.0);
                c.set(i, s, 1.0);
                let row = self.vjp(&c)?;
                for (col, v) in row.as_slice().iter().enumerate() {
                    jac[(s * k + i, col)] = *v;
                }
            }
        }
        Ok(jac)
    }

    /// Block-diagonal per-sample output Hessian, ordered like [`Self::jacobian`].
    pub fn output_hessian(&self) -> Result<DMatrix<f64>> {
        let (k, n) = self.outputs().dims();
        let mut h = DMatrix::zeros(k * n, k * n);
        for s in 0..n {
            for i in 0..k {
                let mut t = self.outputs().full_like(0.0);
                t.set(i, s, 1.0);
                let col = batch_hess_z_apply(self.problem.loss, self.outputs(), &self.problem.batch.targets, &t)?;
                for l in 0..k {
                    h[(s * k + l, s * k + i)] = col.get(l, s) * n as f64;
                }
            }
        }
        Ok(h)
    }
}

impl LinearOperator for CurvatureOperator {
    fn dim(&self) -> usize {
        self.params.len()
    }

    fn apply(&self, v: &ParamVector) -> Result<ParamVector> {
        match self.kind {
            CurvatureKind::Hessian => self.hvp(v),
            CurvatureKind::GaussNewton => self.gnvp(v),
            CurvatureKind::Nme => self.nmevp(v),
        }
    }
}

pub fn gnvp(op: &CurvatureOperator, v: &ParamVector) -> Result<ParamVector> {
    op.gnvp(v)
}

pub fn nmevp(op: &CurvatureOperator, v: &ParamVector) -> Result<ParamVector> {
    op.nmevp(v)
}

/// Hessian of an arbitrary scalar loss recorded on a tape.
pub struct LossHessian {
    tape: Tape,
    loss: NodeId,
}

impl LossHessian {
    pub fn new<F>(loss_fn: F, layout: &ParamLayout, theta: &ParamVector) -> Result<Self>
    where
        F: FnOnce(&mut Tape, &[NodeId]) -> Result<NodeId>,
    {
        let (tape, loss) = record(loss_fn, layout, theta, Default::default())?;
        if !tape.value(loss).is_scalar() {
            return Err(Error::Shape("loss must be scalar".into()));
        }
        Ok(Self { tape, loss })
    }
}

impl LinearOperator for LossHessian {
    fn dim(&self) -> usize {
        self.tape.num_params()
    }

    fn apply(&self, v: &ParamVector) -> Result<ParamVector> {
        Ok(self.tape.hvp(self.loss, v)?.1)
    }
}

/// An explicit symmetric matrix.
pub struct DenseOperator(pub DMatrix<f64>);

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.0.ncols()
    }

    fn apply(&self, v: &ParamVector) -> Result<ParamVector> {
        if v.len() != self.dim() {
            return Err(Error::Shape(format!("vector of length {} for {}-dim operator", v.len(), self.dim())));
        }
        let out = &self.0 * nalgebra::DVector::from_column_slice(v.as_slice());
        Ok(ParamVector::new(out.as_slice().to_vec()))
    }
}
