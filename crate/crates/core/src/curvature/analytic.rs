//! Closed-form second derivative of a bias-free MLP output with respect to
//! two weight matrices, built from explicit partial Jacobians rather than
//! the tape.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::nn::ModelSpec;
use crate::tape::{ParamVector, Tensor};

struct Layers {
    w: Vec<DMatrix<f64>>,
    x: Vec<DVector<f64>>,
    d1: Vec<DVector<f64>>,
    d2: Vec<DVector<f64>>,
}

impl Layers {
    fn new(spec: &ModelSpec, params: &ParamVector, input: &[f64]) -> Result<Self> {
        let depth = spec.depth();
        let blocks = spec.layout().split(params)?;
        let w: Vec<DMatrix<f64>> =
            blocks.iter().map(|b| DMatrix::from_row_slice(b.rows(), b.cols(), b.data())).collect();
        let act = spec.activation;
        let mut x = vec![DVector::from_column_slice(input)];
        let (mut d1, mut d2) = (Vec::new(), Vec::new());
        for (o, wo) in w.iter().enumerate() {
            let h = wo * &x[o];
            if spec.activates(o) {
                x.push(h.map(|v| act.value(v)));
                d1.push(h.map(|v| act.first(v)));
                d2.push(h.map(|v| act.second(v)));
            } else {
                d1.push(DVector::from_element(h.len(), 1.0));
                d2.push(DVector::zeros(h.len()));
                x.push(h);
            }
        }
        debug_assert_eq!(x.len(), depth + 1);
        Ok(Self { w, x, d1, d2 })
    }

    fn depth(&self) -> usize {
        self.w.len()
    }

    /// `∂x_a/∂x_b` for `a ≥ b`.
    fn jac(&self, a: usize, b: usize) -> DMatrix<f64> {
        let mut j = DMatrix::identity(self.x[b].len(), self.x[b].len());
        for o in b..a {
            j = DMatrix::from_diagonal(&self.d1[o]) * &self.w[o] * j;
        }
        j
    }

    /// `∂h_o/∂W_m · B` for every `o ≥ m` (index `o − m`).
    fn pre_tangents(&self, m: usize, b: &DMatrix<f64>) -> Vec<DVector<f64>> {
        let mut out = vec![b * &self.x[m]];
        for o in (m + 1)..self.depth() {
            let prev = out.last().unwrap().component_mul(&self.d1[o - 1]);
            out.push(&self.w[o] * prev);
        }
        out
    }
}

fn as_matrix(t: &Tensor, rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>> {
    if t.rank() != 2 || t.rows() != rows || t.cols() != cols {
        return Err(Error::Shape(format!("{what} has shape {:?}, expected [{rows}, {cols}]", t.shape())));
    }
    Ok(DMatrix::from_row_slice(rows, cols, t.data()))
}

/// `∂²x_L/∂W_l∂W_m · (A ⊗ B)` for a single input, `l ≤ m`.
///
/// For `m > l` one term carries only first derivatives of φ (the direct
/// dependence on `W_m`) and the rest carry φ″ at layers `m..L`. For `m = l`
/// every term carries φ″. The AD-effective derivatives of the activation are
/// used, so overridden second derivatives enter here too.
pub fn analytic_second_derivative(
    spec: &ModelSpec,
    params: &ParamVector,
    input: &[f64],
    l: usize,
    m: usize,
    a: &Tensor,
    b: &Tensor,
) -> Result<Tensor> {
    if spec.bias {
        return Err(Error::InvalidArgument("the analytic second derivative supports bias-free models only".into()));
    }
    if l > m || m >= spec.depth() {
        return Err(Error::InvalidArgument(format!(
            "need l <= m < depth, got l={l}, m={m}, depth={}",
            spec.depth()
        )));
    }
    if input.len() != spec.input_width() {
        return Err(Error::Shape(format!(
            "layer 0 expects input width {}, got {}",
            spec.input_width(),
            input.len()
        )));
    }
    let net = Layers::new(spec, params, input)?;
    let depth = net.depth();
    let a = as_matrix(a, spec.widths[l + 1], spec.widths[l], "A")?;
    let b = as_matrix(b, spec.widths[m + 1], spec.widths[m], "B")?;
    let dh = net.pre_tangents(m, &b);

    let mut out = DVector::zeros(spec.output_width());
    let ax = &a * &net.x[l];
    if m > l {
        let u = ax.component_mul(&net.d1[l]);
        let direct = (&b * (net.jac(m, l + 1) * &u)).component_mul(&net.d1[m]);
        out += net.jac(depth, m + 1) * direct;
        for o in m..depth {
            let inner = &net.w[o] * (net.jac(o, l + 1) * &u);
            let term = net.d2[o].component_mul(&dh[o - m]).component_mul(&inner);
            out += net.jac(depth, o + 1) * term;
        }
    } else {
        let own = net.d2[l].component_mul(&dh[0]).component_mul(&ax);
        out += net.jac(depth, l + 1) * own;
        let u = ax.component_mul(&net.d1[l]);
        for o in (l + 1)..depth {
            let inner = &net.w[o] * (net.jac(o, l + 1) * &u);
            let term = net.d2[o].component_mul(&dh[o - m]).component_mul(&inner);
            out += net.jac(depth, o + 1) * term;
        }
    }
    Ok(Tensor::vector(out.as_slice().to_vec()))
}
