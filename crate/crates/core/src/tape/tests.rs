use std::f64::consts::PI;
use std::sync::Arc;

use proptest::prelude::*;

use super::*;

fn no_overrides() -> Arc<OverrideRegistry> {
    Arc::new(OverrideRegistry::new())
}

/// Central differences of `f` along every coordinate.
fn fd_grad(f: impl Fn(&ParamVector) -> f64, theta: &ParamVector, eps: f64) -> ParamVector {
    let mut g = ParamVector::zeros(theta.len());
    for i in 0..theta.len() {
        let mut p = theta.clone();
        p[i] += eps;
        let up = f(&p);
        p[i] -= 2.0 * eps;
        let down = f(&p);
        g[i] = (up - down) / (2.0 * eps);
    }
    g
}

fn assert_close(a: &ParamVector, b: &ParamVector, rtol: f64, atol: f64) {
    for i in 0..a.len() {
        let tol = atol + rtol * b[i].abs().max(a[i].abs());
        assert!((a[i] - b[i]).abs() <= tol, "entry {i}: {} vs {}", a[i], b[i]);
    }
}

/// f(theta) = sum(tanh(W theta) * gelu(theta)) + 0.3 * theta.theta with W fixed.
fn smooth_loss(tape: &mut Tape, p: &[NodeId]) -> Result<NodeId> {
    let w = tape.constant(Tensor::matrix(3, 3, vec![0.5, -1.0, 0.2, 0.3, 0.8, -0.6, 1.1, 0.1, 0.4]).unwrap());
    let wt = tape.matmul(w, p[0])?;
    let a = tape.activation(wt, Primitive::tanh())?;
    let b = tape.activation(p[0], Primitive::gelu())?;
    let ab = tape.dot(a, b)?;
    let sq = tape.dot(p[0], p[0])?;
    let sq = tape.scale(sq, 0.3)?;
    tape.add(ab, sq)
}

fn eval_smooth(theta: &ParamVector) -> f64 {
    let (tape, loss) = record(smooth_loss, &ParamLayout::flat(3), theta, no_overrides()).unwrap();
    tape.value(loss).item().unwrap()
}

#[test]
fn grad_of_squared_norm() {
    let (loss, g) = value_and_grad(
        |t, p| t.dot(p[0], p[0]),
        &ParamLayout::flat(1),
        &ParamVector::new(vec![3.0]),
        no_overrides(),
    )
    .unwrap();
    assert_eq!(loss, 9.0);
    assert_eq!(g.as_slice(), &[6.0]);
}

#[test]
fn linear_mse_gradient_is_residual_outer_input() {
    // z = W x, L = 0.5 ||z - y||^2, dL/dW = (z - y) x^T
    let layout = ParamLayout::new(vec![vec![2, 3]]);
    let w = ParamVector::new(vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]);
    let x = Tensor::vector(vec![1.0, 2.0, -1.0]);
    let y = Tensor::vector(vec![0.5, -0.5]);
    let (tape, loss) = record(
        |t, p| {
            let xi = t.constant(x.clone());
            let z = t.matmul(p[0], xi)?;
            t.mse(z, y.clone())
        },
        &layout,
        &w,
        no_overrides(),
    )
    .unwrap();
    let g = tape.grad(loss).unwrap();
    let z = [0.1 - 0.4 - 0.3, 0.4 + 1.0 + 0.6];
    let r = [z[0] - 0.5, z[1] + 0.5];
    let expected: Vec<f64> =
        (0..2).flat_map(|i| x.data().iter().map(move |xj| r[i] * xj)).collect();
    assert_close(&g, &ParamVector::new(expected), 1e-15, 1e-15);
}

#[test]
fn grad_matches_finite_differences() {
    let theta = ParamVector::new(vec![0.3, -0.7, 1.2]);
    let (_, g) = value_and_grad(smooth_loss, &ParamLayout::flat(3), &theta, no_overrides()).unwrap();
    let fd = fd_grad(eval_smooth, &theta, 1e-5);
    assert_close(&g, &fd, 1e-6, 1e-9);
}

#[test]
fn jvp_zero_and_linear_cases() {
    let layout = ParamLayout::new(vec![vec![2, 2]]);
    let w = ParamVector::new(vec![1.0, 2.0, 3.0, 4.0]);
    let x = Tensor::vector(vec![0.5, -1.5]);
    let (tape, z) = record(
        |t, p| {
            let xi = t.constant(x.clone());
            t.matmul(p[0], xi)
        },
        &layout,
        &w,
        no_overrides(),
    )
    .unwrap();
    assert_eq!(tape.jvp(z, &ParamVector::zeros(4)).unwrap().data(), &[0.0, 0.0]);
    // tangent A = [[1, 0], [2, -1]] -> A x
    let a = ParamVector::new(vec![1.0, 0.0, 2.0, -1.0]);
    assert_eq!(tape.jvp(z, &a).unwrap().data(), &[0.5, 2.5]);
    assert!(matches!(tape.jvp(z, &ParamVector::zeros(3)), Err(Error::Shape(_))));
}

#[test]
fn jvp_matches_finite_differences() {
    let theta = ParamVector::new(vec![0.3, -0.7, 1.2]);
    let v = ParamVector::new(vec![0.2, 0.5, -0.4]);
    let out = |th: &ParamVector| {
        let (tape, z) = record(
            |t, p| {
                let a = t.activation(p[0], Primitive::beta_gelu(2.0))?;
                t.mul(a, p[0])
            },
            &ParamLayout::flat(3),
            th,
            no_overrides(),
        )
        .unwrap();
        (tape.value(z).clone(), tape.jvp(z, &v).unwrap())
    };
    let (_, j) = out(&theta);
    let eps = 1e-6;
    let (up, _) = out(&theta.plus(eps, &v));
    let (down, _) = out(&theta.plus(-eps, &v));
    for i in 0..3 {
        let fd = (up.data()[i] - down.data()[i]) / (2.0 * eps);
        assert!((j.data()[i] - fd).abs() <= 1e-5 * fd.abs().max(1e-3));
    }
}

#[test]
fn hvp_of_quadratic_form() {
    let h = Tensor::matrix(2, 2, vec![2.0, 1.0, 1.0, 3.0]).unwrap();
    let out = hvp(
        |t, p| {
            let hc = t.constant(h.clone());
            let hp = t.matmul(hc, p[0])?;
            let q = t.dot(p[0], hp)?;
            t.scale(q, 0.5)
        },
        &ParamLayout::flat(2),
        &ParamVector::new(vec![0.4, -0.9]),
        &ParamVector::new(vec![1.0, 0.0]),
        no_overrides(),
    )
    .unwrap();
    assert_eq!(out.hvp.as_slice(), &[2.0, 1.0]);
}

#[test]
fn hvp_matches_gradient_differences() {
    let theta = ParamVector::new(vec![0.3, -0.7, 1.2]);
    let v = ParamVector::new(vec![-0.5, 0.25, 1.0]);
    let layout = ParamLayout::flat(3);
    let g = |th: &ParamVector| value_and_grad(smooth_loss, &layout, th, no_overrides()).unwrap().1;
    let out = hvp(smooth_loss, &layout, &theta, &v, no_overrides()).unwrap();
    let eps = 1e-5;
    let (gp, gm) = (g(&theta.plus(eps, &v)), g(&theta.plus(-eps, &v)));
    let fd = ParamVector::new((0..3).map(|i| (gp[i] - gm[i]) / (2.0 * eps)).collect());
    assert_close(&out.hvp, &fd, 1e-5, 1e-8);
}

/// z = w2 * act(w1 * x); returns the HVP output along e_w1.
fn one_unit_net(
    primitive: Primitive,
    w: [f64; 2],
    x: f64,
    overrides: Arc<OverrideRegistry>,
) -> HvpOutput {
    hvp(
        |t, p| {
            let xin = t.constant(Tensor::vector(vec![x]));
            let h = t.matmul(p[0], xin)?;
            let a = t.activation(h, primitive)?;
            let z = t.matmul(p[1], a)?;
            t.sum(z)
        },
        &ParamLayout::new(vec![vec![1, 1], vec![1, 1]]),
        &ParamVector::new(w.to_vec()),
        &ParamVector::new(vec![1.0, 0.0]),
        overrides,
    )
    .unwrap()
}

#[test]
fn relu_gaussian_override_enters_hvp() {
    let mut reg = OverrideRegistry::new();
    reg.register(DerivativeOverride::new(PrimitiveId::Relu, 2, |x| gaussian_bump(x, 1.0)))
        .unwrap();
    // h = w1 * x = 0 exactly; d2z/dw1^2 = w2 * x^2 * phi''(0)
    let with = one_unit_net(Primitive::relu(), [0.0, 1.0], 1.0, Arc::new(reg));
    let expected = 1.0 / (2.0 * PI).sqrt();
    assert!((with.hvp[0] - expected).abs() < 1e-15, "{}", with.hvp[0]);
    let without = one_unit_net(Primitive::relu(), [0.0, 1.0], 1.0, no_overrides());
    assert_eq!(without.hvp[0], 0.0);
}

#[test]
fn zero_gelu_override_removes_second_derivative_terms() {
    let mut reg = OverrideRegistry::new();
    reg.register(DerivativeOverride::new(PrimitiveId::Gelu, 2, |_| 0.0)).unwrap();
    let reg = Arc::new(reg);
    let true_path = one_unit_net(Primitive::gelu(), [0.4, 1.3], 0.7, no_overrides());
    let dim = one_unit_net(Primitive::gelu(), [0.4, 1.3], 0.7, reg);
    let h: f64 = 0.4 * 0.7;
    assert!((true_path.hvp[0] - 1.3 * 0.49 * beta_gelu_d2(h, 1.0)).abs() < 1e-14);
    assert_eq!(dim.hvp[0], 0.0);
    // the mixed w1/w2 entry only needs the first derivative
    assert_eq!(dim.hvp[1], true_path.hvp[1]);
    assert_eq!(dim.grad, true_path.grad);
    assert_eq!(dim.loss.to_bits(), true_path.loss.to_bits());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let (tape, out) = record(
        |t, p| t.scale(p[0], 2.0),
        &ParamLayout::flat(2),
        &ParamVector::new(vec![1.0, 2.0]),
        no_overrides(),
    )
    .unwrap();
    assert!(matches!(tape.grad(out), Err(Error::Shape(_))));
    assert!(tape.hvp(out, &ParamVector::zeros(2)).is_err());
}

#[test]
fn non_finite_values_are_rejected() {
    let mut tape = Tape::default();
    let a = tape.param(Tensor::vector(vec![1e200]));
    let err = tape.mul(a, a).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}

#[test]
fn topological_order_and_bit_exact_replay() {
    let theta = ParamVector::new(vec![0.3, -0.7, 1.2]);
    let (tape, _) = record(smooth_loss, &ParamLayout::flat(3), &theta, no_overrides()).unwrap();
    for i in 0..tape.len() {
        for p in tape.parents(NodeId(i)) {
            assert!(p.index() < i);
        }
    }
    let replayed = tape.replay();
    for (i, v) in replayed.iter().enumerate() {
        let recorded = tape.value(NodeId(i));
        assert!(v.data().iter().zip(recorded.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn cross_entropy_node_gradient_and_hvp() {
    // logits z = theta (one column), target one-hot class 1
    let theta = ParamVector::new(vec![0.2, -0.4, 1.0]);
    let y = Tensor::matrix(3, 1, vec![0.0, 1.0, 0.0]).unwrap();
    let layout = ParamLayout::new(vec![vec![3, 1]]);
    let v = ParamVector::new(vec![1.0, 2.0, -1.0]);
    let out = hvp(|t, p| t.softmax_cross_entropy(p[0], y.clone()), &layout, &theta, &v, no_overrides())
        .unwrap();
    let e: Vec<f64> = theta.as_slice().iter().map(|z| z.exp()).collect();
    let s: f64 = e.iter().sum();
    let p: Vec<f64> = e.iter().map(|x| x / s).collect();
    let pv: f64 = p.iter().zip(v.as_slice()).map(|(a, b)| a * b).sum();
    for i in 0..3 {
        let g = p[i] - y.data()[i];
        assert!((out.grad[i] - g).abs() < 1e-15);
        let hv = p[i] * v[i] - p[i] * pv;
        assert!((out.hvp[i] - hv).abs() < 1e-15);
    }
    assert!((out.loss - (s.ln() - theta[1])).abs() < 1e-15);
}

#[test]
fn bias_broadcast_gradient() {
    let layout = ParamLayout::new(vec![vec![2]]);
    let b = ParamVector::new(vec![0.5, -0.5]);
    let h = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let (loss, g) = value_and_grad(
        |t, p| {
            let hc = t.constant(h.clone());
            let z = t.add_bias(hc, p[0])?;
            let zz = t.dot(z, z)?;
            t.scale(zz, 0.5)
        },
        &layout,
        &b,
        no_overrides(),
    )
    .unwrap();
    assert!(loss > 0.0);
    // d/db_i = sum_j (h_ij + b_i)
    assert_eq!(g.as_slice(), &[1.5 + 2.5 + 3.5, 3.5 + 4.5 + 5.5]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hvp_is_symmetric_and_linear(
        theta in prop::collection::vec(-2.0f64..2.0, 3),
        u in prop::collection::vec(-1.0f64..1.0, 3),
        v in prop::collection::vec(-1.0f64..1.0, 3),
        a in -3.0f64..3.0,
    ) {
        let theta = ParamVector::new(theta);
        let (u, v) = (ParamVector::new(u), ParamVector::new(v));
        let hv = |d: &ParamVector| hvp(smooth_loss, &ParamLayout::flat(3), &theta, d, no_overrides()).unwrap().hvp;
        let (hu, hvv) = (hv(&u), hv(&v));
        prop_assert!((u.dot(&hvv) - v.dot(&hu)).abs() <= 1e-12 * (1.0 + u.dot(&hvv).abs()));
        let combo = hv(&u.plus(a, &v));
        assert_close(&combo, &hu.plus(a, &hvv), 1e-12, 1e-12);
    }
}
