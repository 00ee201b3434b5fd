//! Reverse-mode tape with a tangent-carrying reverse sweep.
//!
//! A [`Tape`] records values eagerly as operations are added. Three sweeps
//! run over a recorded tape:
//!
//! * forward tangents (`jvp`): `J v` for a parameter-space direction `v`;
//! * reverse adjoints (`grad`, `vjp`): `J^T c`;
//! * reverse adjoints differentiated along `v` (`hvp`, `vjp_tangent`): the
//!   forward-over-reverse composition, which yields Hessian-vector products
//!   without taping the reverse sweep.
//!
//! Elementwise primitives consult the tape's [`OverrideRegistry`] for their
//! first and second derivatives; every other operation uses exact rules.

mod overrides;
mod params;
mod primitive;
mod tensor;

use std::sync::Arc;

use crate::error::{Error, Result};

pub use overrides::{DerivativeOverride, OverrideRegistry, Replacement};
pub use params::{ParamLayout, ParamVector};
pub use primitive::{
    beta_gelu, beta_gelu_d1, beta_gelu_d2, gaussian_bump, heaviside, normal_cdf, normal_pdf,
    relu, Primitive, PrimitiveId,
};
pub use tensor::Tensor;

pub(crate) use tensor::{matmul, matmul_a_bt, matmul_at_b};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBias(NodeId, NodeId),
    Sum(NodeId),
    Activation(NodeId, Primitive),
    /// Batch-mean of `0.5 * ||z_n - y_n||^2` over columns.
    Mse(NodeId, Tensor),
    /// Batch-mean softmax cross-entropy over columns, from logits.
    SoftmaxCrossEntropy(NodeId, Tensor),
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Constant | Op::Param => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Activation(a, _)
            | Op::Mse(a, _)
            | Op::SoftmaxCrossEntropy(a, _) => vec![*a],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::Sum(..) => "sum",
            Op::Activation(..) => "activation",
            Op::Mse(..) => "mse",
            Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
    overrides: Arc<OverrideRegistry>,
}

type Slots = Vec<Option<Tensor>>;

impl Tape {
    pub fn new(overrides: Arc<OverrideRegistry>) -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), overrides }
    }

    pub fn overrides(&self) -> &OverrideRegistry {
        &self.overrides
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    pub fn param_nodes(&self) -> &[NodeId] {
        &self.params
    }

    pub fn param_layout(&self) -> ParamLayout {
        ParamLayout::new(self.params.iter().map(|p| self.value(*p).shape().to_vec()).collect())
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| self.value(*p).len()).sum()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{} (node {})", op.name(), self.nodes.len())));
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Constant, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Adds a differentiable leaf. Parameter blocks flatten in creation order.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Param, value });
        let id = NodeId(self.nodes.len() - 1);
        self.params.push(id);
        id
    }

    /// One parameter leaf per layout block, filled from `theta`.
    pub fn params_from(&mut self, layout: &ParamLayout, theta: &ParamVector) -> Result<Vec<NodeId>> {
        Ok(layout.split(theta)?.into_iter().map(|t| self.param(t)).collect())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || va.cols() != vb.rows() || vb.rank() == 0 {
            return Err(Error::Shape(format!(
                "matmul of {:?} by {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let v = matmul(va, vb);
        self.push(Op::MatMul(a, b), v)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what} of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| k * x);
        self.push(Op::Scale(a, k), v)
    }

    /// Adds the vector `b` to every column of `h`.
    pub fn add_bias(&mut self, h: NodeId, b: NodeId) -> Result<NodeId> {
        let (vh, vb) = (self.value(h), self.value(b));
        if vb.rank() != 1 || vb.len() != vh.rows() {
            return Err(Error::Shape(format!(
                "bias {:?} does not match rows of {:?}",
                vb.shape(),
                vh.shape()
            )));
        }
        let v = add_bias_value(vh, vb);
        self.push(Op::AddBias(h, b), v)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    /// `sum(a * b)` as a scalar node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let m = self.mul(a, b)?;
        self.sum(m)
    }

    pub fn activation(&mut self, a: NodeId, primitive: Primitive) -> Result<NodeId> {
        let v = self.value(a).map(|x| primitive.value(x));
        self.push(Op::Activation(a, primitive), v)
    }

    pub fn mse(&mut self, z: NodeId, target: Tensor) -> Result<NodeId> {
        if self.value(z).shape() != target.shape() {
            return Err(Error::Shape(format!(
                "mse prediction {:?} vs target {:?}",
                self.value(z).shape(),
                target.shape()
            )));
        }
        let v = Tensor::scalar(mse_value(self.value(z), &target));
        self.push(Op::Mse(z, target), v)
    }

    /// `target` columns are label distributions (one-hot for hard labels).
    pub fn softmax_cross_entropy(&mut self, z: NodeId, target: Tensor) -> Result<NodeId> {
        if self.value(z).shape() != target.shape() {
            return Err(Error::Shape(format!(
                "cross-entropy logits {:?} vs target {:?}",
                self.value(z).shape(),
                target.shape()
            )));
        }
        let v = Tensor::scalar(cross_entropy_value(self.value(z), &target));
        self.push(Op::SoftmaxCrossEntropy(z, target), v)
    }

    /// Recomputes every non-leaf value from the recorded leaves.
    pub fn replay(&self) -> Vec<Tensor> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = |id: &NodeId| &vals[id.0];
            let out = match &node.op {
                Op::Constant | Op::Param => node.value.clone(),
                Op::MatMul(a, b) => matmul(v(a), v(b)),
                Op::Add(a, b) => v(a).zip_map(v(b), |x, y| x + y),
                Op::Sub(a, b) => v(a).zip_map(v(b), |x, y| x - y),
                Op::Mul(a, b) => v(a).zip_map(v(b), |x, y| x * y),
                Op::Scale(a, k) => v(a).map(|x| k * x),
                Op::AddBias(h, b) => add_bias_value(v(h), v(b)),
                Op::Sum(a) => Tensor::scalar(v(a).sum()),
                Op::Activation(a, p) => v(a).map(|x| p.value(x)),
                Op::Mse(z, y) => Tensor::scalar(mse_value(v(z), y)),
                Op::SoftmaxCrossEntropy(z, y) => Tensor::scalar(cross_entropy_value(v(z), y)),
            };
            vals.push(out);
        }
        vals
    }

    fn check_direction(&self, v: &ParamVector) -> Result<()> {
        if v.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "direction has {} entries but the tape has {} parameters",
                v.len(),
                self.num_params()
            )));
        }
        Ok(())
    }

    /// Forward tangents of all nodes up to `upto` for parameter direction `v`.
    fn tangents(&self, upto: NodeId, v: &ParamVector) -> Result<Slots> {
        self.check_direction(v)?;
        let blocks = self.param_layout().split(v)?;
        let mut block_of = vec![usize::MAX; self.nodes.len()];
        for (i, p) in self.params.iter().enumerate() {
            block_of[p.0] = i;
        }
        let mut tan: Slots = Vec::with_capacity(upto.0 + 1);
        for (i, node) in self.nodes[..=upto.0].iter().enumerate() {
            let val = |id: &NodeId| &self.nodes[id.0].value;
            let t = |id: &NodeId| tan[id.0].as_ref();
            let out = match &node.op {
                Op::Constant => None,
                Op::Param => Some(blocks[block_of[i]].clone()),
                Op::MatMul(a, b) => sum_opt(
                    t(a).map(|ta| matmul(ta, val(b))),
                    t(b).map(|tb| matmul(val(a), tb)),
                ),
                Op::Add(a, b) => sum_opt(t(a).cloned(), t(b).cloned()),
                Op::Sub(a, b) => sum_opt(t(a).cloned(), t(b).map(|tb| tb.map(|x| -x))),
                Op::Mul(a, b) => sum_opt(
                    t(a).map(|ta| ta.zip_map(val(b), |x, y| x * y)),
                    t(b).map(|tb| val(a).zip_map(tb, |x, y| x * y)),
                ),
                Op::Scale(a, k) => t(a).map(|ta| ta.map(|x| k * x)),
                Op::AddBias(h, b) => {
                    let th = t(h).cloned();
                    let tb = t(b).map(|tb| add_bias_value(&val(h).full_like(0.0), tb));
                    sum_opt(th, tb)
                }
                Op::Sum(a) => t(a).map(|ta| Tensor::scalar(ta.sum())),
                Op::Activation(a, p) => {
                    t(a).map(|ta| val(a).zip_map(ta, |xv, tv| self.overrides.first(p, xv) * tv))
                }
                Op::Mse(z, y) => t(z).map(|tz| {
                    let r = mse_residual(val(z), y);
                    Tensor::scalar(r.data().iter().zip(tz.data()).map(|(a, b)| a * b).sum())
                }),
                Op::SoftmaxCrossEntropy(z, y) => t(z).map(|tz| {
                    let r = cross_entropy_residual(val(z), y);
                    Tensor::scalar(r.data().iter().zip(tz.data()).map(|(a, b)| a * b).sum())
                }),
            };
            if let Some(o) = &out {
                if !o.is_finite() {
                    return Err(Error::NonFinite(format!("tangent of {} (node {i})", node.op.name())));
                }
            }
            tan.push(out);
        }
        Ok(tan)
    }

    /// Reverse sweep from `output`, optionally differentiated along forward
    /// tangents. Returns (adjoints, adjoint tangents).
    fn reverse(
        &self,
        output: NodeId,
        seed: Tensor,
        seed_dot: Option<Tensor>,
        tan: Option<&Slots>,
    ) -> (Slots, Slots) {
        let n = output.0 + 1;
        let mut adj: Slots = vec![None; n];
        let mut adj_dot: Slots = vec![None; n];
        adj[output.0] = Some(seed);
        adj_dot[output.0] = seed_dot;
        let t = |id: &NodeId| tan.and_then(|tt| tt[id.0].as_ref());

        for i in (0..n).rev() {
            let g = adj[i].take();
            let gd = adj_dot[i].take();
            if g.is_none() && gd.is_none() {
                continue;
            }
            let node = &self.nodes[i];
            let val = |id: &NodeId| &self.nodes[id.0].value;
            match &node.op {
                Op::Constant | Op::Param => {
                    adj[i] = g;
                    adj_dot[i] = gd;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    if let Some(g) = &g {
                        accumulate(&mut adj[a.0], matmul_a_bt(g, vb));
                        accumulate(&mut adj[b.0], matmul_at_b(va, g));
                        if let Some(tb) = t(b) {
                            accumulate(&mut adj_dot[a.0], matmul_a_bt(g, tb));
                        }
                        if let Some(ta) = t(a) {
                            accumulate(&mut adj_dot[b.0], matmul_at_b(ta, g));
                        }
                    }
                    if let Some(gd) = &gd {
                        accumulate(&mut adj_dot[a.0], matmul_a_bt(gd, vb));
                        accumulate(&mut adj_dot[b.0], matmul_at_b(va, gd));
                    }
                }
                Op::Add(a, b) => {
                    if let Some(g) = &g {
                        accumulate(&mut adj[a.0], g.clone());
                        accumulate(&mut adj[b.0], g.clone());
                    }
                    if let Some(gd) = &gd {
                        accumulate(&mut adj_dot[a.0], gd.clone());
                        accumulate(&mut adj_dot[b.0], gd.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(g) = &g {
                        accumulate(&mut adj[a.0], g.clone());
                        accumulate(&mut adj[b.0], g.map(|x| -x));
                    }
                    if let Some(gd) = &gd {
                        accumulate(&mut adj_dot[a.0], gd.clone());
                        accumulate(&mut adj_dot[b.0], gd.map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    let prod = |x: &Tensor, y: &Tensor| x.zip_map(y, |p, q| p * q);
                    if let Some(g) = &g {
                        accumulate(&mut adj[a.0], prod(g, vb));
                        accumulate(&mut adj[b.0], prod(g, va));
                        if let Some(tb) = t(b) {
                            accumulate(&mut adj_dot[a.0], prod(g, tb));
                        }
                        if let Some(ta) = t(a) {
                            accumulate(&mut adj_dot[b.0], prod(g, ta));
                        }
                    }
                    if let Some(gd) = &gd {
                        accumulate(&mut adj_dot[a.0], prod(gd, vb));
                        accumulate(&mut adj_dot[b.0], prod(gd, va));
                    }
                }
                Op::Scale(a, k) => {
                    if let Some(g) = &g {
                        accumulate(&mut adj[a.0], g.map(|x| k * x));
                    }
                    if let Some(gd) = &gd {
                        accumulate(&mut adj_dot[a.0], gd.map(|x| k * x));
                    }
                }
                Op::AddBias(h, b) => {
                    if let Some(g) = &g {
                        accumulate(&mut adj[h.0], g.clone());
                        accumulate(&mut adj[b.0], row_sums(g));
                    }
                    if let Some(gd) = &gd {
                        accumulate(&mut adj_dot[h.0], gd.clone());
                        accumulate(&mut adj_dot[b.0], row_sums(gd));
                    }
                }
                Op::Sum(a) => {
                    let va = val(a);
                    if let Some(g) = &g {
                        accumulate(&mut adj[a.0], va.full_like(g.data()[0]));
                    }
                    if let Some(gd) = &gd {
                        accumulate(&mut adj_dot[a.0], va.full_like(gd.data()[0]));
                    }
                }
                Op::Activation(a, p) => {
                    let x = val(a);
                    let d1 = x.map(|xv| self.overrides.first(p, xv));
                    if let Some(g) = &g {
                        accumulate(&mut adj[a.0], g.zip_map(&d1, |u, w| u * w));
                        if let Some(ta) = t(a) {
                            let d2 = x.map(|xv| self.overrides.second(p, xv));
                            let mut term = g.zip_map(&d2, |u, w| u * w);
                            for (o, &tv) in term.data_mut().iter_mut().zip(ta.data()) {
                                *o *= tv;
                            }
                            accumulate(&mut adj_dot[a.0], term);
                        }
                    }
                    if let Some(gd) = &gd {
                        accumulate(&mut adj_dot[a.0], gd.zip_map(&d1, |u, w| u * w));
                    }
                }
                Op::Mse(z, y) => {
                    let vz = val(z);
                    let cols = vz.cols() as f64;
                    let r = mse_residual(vz, y);
                    if let Some(g) = &g {
                        let s = g.data()[0];
                        accumulate(&mut adj[z.0], r.map(|x| s * x));
                        if let Some(tz) = t(z) {
                            accumulate(&mut adj_dot[z.0], tz.map(|x| s * x / cols));
                        }
                    }
                    if let Some(gd) = &gd {
                        let s = gd.data()[0];
                        accumulate(&mut adj_dot[z.0], r.map(|x| s * x));
                    }
                }
                Op::SoftmaxCrossEntropy(z, y) => {
                    let vz = val(z);
                    let r = cross_entropy_residual(vz, y);
                    if let Some(g) = &g {
                        let s = g.data()[0];
                        accumulate(&mut adj[z.0], r.map(|x| s * x));
                        if let Some(tz) = t(z) {
                            let hz = cross_entropy_hess_apply(vz, y, tz);
                            accumulate(&mut adj_dot[z.0], hz.map(|x| s * x));
                        }
                    }
                    if let Some(gd) = &gd {
                        let s = gd.data()[0];
                        accumulate(&mut adj_dot[z.0], r.map(|x| s * x));
                    }
                }
            }
        }
        (adj, adj_dot)
    }

    fn flatten(&self, slots: &Slots, what: &str) -> Result<ParamVector> {
        let mut out = Vec::with_capacity(self.num_params());
        for p in &self.params {
            match slots.get(p.0).and_then(|s| s.as_ref()) {
                Some(t) => out.extend_from_slice(t.data()),
                None => out.extend(std::iter::repeat_n(0.0, self.value(*p).len())),
            }
        }
        let v = ParamVector::new(out);
        if !v.is_finite() {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(v)
    }

    fn check_scalar(&self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "loss node must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        Ok(())
    }

    /// Gradient of a scalar node with respect to all parameters.
    pub fn grad(&self, loss: NodeId) -> Result<ParamVector> {
        self.check_scalar(loss)?;
        let seed = self.value(loss).full_like(1.0);
        let (adj, _) = self.reverse(loss, seed, None, None);
        self.flatten(&adj, "gradient")
    }

    /// `J^T c` for the Jacobian of `output` with respect to the parameters.
    pub fn vjp(&self, output: NodeId, cotangent: &Tensor) -> Result<ParamVector> {
        if cotangent.shape() != self.value(output).shape() {
            return Err(Error::Shape(format!(
                "cotangent {:?} vs output {:?}",
                cotangent.shape(),
                self.value(output).shape()
            )));
        }
        let (adj, _) = self.reverse(output, cotangent.clone(), None, None);
        self.flatten(&adj, "vjp")
    }

    /// `J v`.
    pub fn jvp(&self, output: NodeId, v: &ParamVector) -> Result<Tensor> {
        let tan = self.tangents(output, v)?;
        Ok(tan[output.0].clone().unwrap_or_else(|| self.value(output).full_like(0.0)))
    }

    /// `(J^T c, d/dt [J(theta + t v)^T (c + t c_dot)])`.
    ///
    /// With `c_dot = None` the cotangent is held fixed, which contracts `c`
    /// with the second derivative of `output`: `sum_a c_a * (d^2 output_a) v`.
    pub fn vjp_tangent(
        &self,
        output: NodeId,
        cotangent: &Tensor,
        cotangent_dot: Option<&Tensor>,
        v: &ParamVector,
    ) -> Result<(ParamVector, ParamVector)> {
        let shape = self.value(output).shape();
        if cotangent.shape() != shape || cotangent_dot.is_some_and(|c| c.shape() != shape) {
            return Err(Error::Shape(format!("cotangent does not match output {shape:?}")));
        }
        let tan = self.tangents(output, v)?;
        let (adj, adj_dot) =
            self.reverse(output, cotangent.clone(), cotangent_dot.cloned(), Some(&tan));
        Ok((self.flatten(&adj, "vjp")?, self.flatten(&adj_dot, "vjp tangent")?))
    }

    /// Gradient and Hessian-vector product of a scalar node.
    pub fn hvp(&self, loss: NodeId, v: &ParamVector) -> Result<(ParamVector, ParamVector)> {
        self.check_scalar(loss)?;
        let seed = self.value(loss).full_like(1.0);
        self.vjp_tangent(loss, &seed, None, v)
    }
}

fn sum_opt(a: Option<Tensor>, b: Option<Tensor>) -> Option<Tensor> {
    match (a, b) {
        (Some(mut x), Some(y)) => {
            x.add_assign(&y);
            Some(x)
        }
        (x, None) => x,
        (None, y) => y,
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(s) => s.add_assign(&t),
        None => *slot = Some(t),
    }
}

pub(crate) fn add_bias_value(h: &Tensor, b: &Tensor) -> Tensor {
    let (r, c) = h.dims();
    let mut out = h.clone();
    let data = out.data_mut();
    for i in 0..r {
        for j in 0..c {
            data[i * c + j] += b.data()[i];
        }
    }
    out
}

fn row_sums(g: &Tensor) -> Tensor {
    let (r, c) = g.dims();
    Tensor::vector((0..r).map(|i| g.data()[i * c..(i + 1) * c].iter().sum()).collect())
}

fn mse_value(z: &Tensor, y: &Tensor) -> f64 {
    let n = z.cols() as f64;
    0.5 * z.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
}

/// `(z - y) / N`: the gradient of the batch-mean MSE.
fn mse_residual(z: &Tensor, y: &Tensor) -> Tensor {
    let n = z.cols() as f64;
    z.zip_map(y, |a, b| (a - b) / n)
}

/// Column-wise softmax with max subtraction.
pub(crate) fn softmax_columns(z: &Tensor) -> Tensor {
    let (r, c) = z.dims();
    let mut p = z.clone();
    for j in 0..c {
        let m = (0..r).map(|i| z.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for i in 0..r {
            let e = (z.get(i, j) - m).exp();
            p.set(i, j, e);
            s += e;
        }
        for i in 0..r {
            p.set(i, j, p.get(i, j) / s);
        }
    }
    p
}

fn column_sums(y: &Tensor) -> Vec<f64> {
    let (r, c) = y.dims();
    (0..c).map(|j| (0..r).map(|i| y.get(i, j)).sum()).collect()
}

fn cross_entropy_value(z: &Tensor, y: &Tensor) -> f64 {
    let (r, c) = z.dims();
    let mut total = 0.0;
    for j in 0..c {
        let m = (0..r).map(|i| z.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..r).map(|i| (z.get(i, j) - m).exp()).sum::<f64>().ln();
        total += (0..r).map(|i| y.get(i, j) * (lse - z.get(i, j))).sum::<f64>();
    }
    total / c as f64
}

/// `(sum(y) p - y) / N` per column.
fn cross_entropy_residual(z: &Tensor, y: &Tensor) -> Tensor {
    let (r, c) = z.dims();
    let p = softmax_columns(z);
    let mass = column_sums(y);
    let mut out = p.clone();
    for j in 0..c {
        for i in 0..r {
            out.set(i, j, (mass[j] * p.get(i, j) - y.get(i, j)) / c as f64);
        }
    }
    out
}

/// Per column `sum(y) (diag(p) - p p^T) t / N`.
fn cross_entropy_hess_apply(z: &Tensor, y: &Tensor, t: &Tensor) -> Tensor {
    let (r, c) = z.dims();
    let p = softmax_columns(z);
    let mass = column_sums(y);
    let mut out = t.clone();
    for j in 0..c {
        let pt: f64 = (0..r).map(|i| p.get(i, j) * t.get(i, j)).sum();
        for i in 0..r {
            out.set(i, j, mass[j] * p.get(i, j) * (t.get(i, j) - pt) / c as f64);
        }
    }
    out
}

/// Records `loss_fn` on a fresh tape whose parameters are `theta` split by
/// `layout`.
pub fn record<F>(
    loss_fn: F,
    layout: &ParamLayout,
    theta: &ParamVector,
    overrides: Arc<OverrideRegistry>,
) -> Result<(Tape, NodeId)>
where
    F: FnOnce(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new(overrides);
    let params = tape.params_from(layout, theta)?;
    let out = loss_fn(&mut tape, &params)?;
    Ok((tape, out))
}

pub fn value_and_grad<F>(
    loss_fn: F,
    layout: &ParamLayout,
    theta: &ParamVector,
    overrides: Arc<OverrideRegistry>,
) -> Result<(f64, ParamVector)>
where
    F: FnOnce(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let (tape, loss) = record(loss_fn, layout, theta, overrides)?;
    let g = tape.grad(loss)?;
    Ok((tape.value(loss).item()?, g))
}

#[derive(Clone, Debug)]
pub struct HvpOutput {
    pub loss: f64,
    pub grad: ParamVector,
    pub hvp: ParamVector,
}

/// Hessian-vector product of `loss_fn` at `theta` along `v`.
pub fn hvp<F>(
    loss_fn: F,
    layout: &ParamLayout,
    theta: &ParamVector,
    v: &ParamVector,
    overrides: Arc<OverrideRegistry>,
) -> Result<HvpOutput>
where
    F: FnOnce(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let (tape, loss) = record(loss_fn, layout, theta, overrides)?;
    let (grad, hv) = tape.hvp(loss, v)?;
    Ok(HvpOutput { loss: tape.value(loss).item()?, grad, hvp: hv })
}

#[cfg(test)]
mod tests;
