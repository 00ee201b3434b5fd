use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::nn::{ActivationSpec, Batch, LossKind, ModelSpec, Problem};
use crate::rng::{normal_vec, stream};
use crate::tape::{ParamLayout, ParamVector, Tensor};

fn tiny(widths: &[usize], act: ActivationSpec, loss: LossKind, n: usize, seed: u64) -> (Problem, ParamVector) {
    let spec = ModelSpec::new(widths.to_vec(), act).unwrap();
    let mut rng = stream(seed, 1_000_000);
    let (d, k) = (widths[0], *widths.last().unwrap());
    let x = Tensor::matrix(d, n, normal_vec(&mut rng, d * n)).unwrap();
    let y = match loss {
        LossKind::Mse => Tensor::matrix(k, n, normal_vec(&mut rng, k * n)).unwrap(),
        LossKind::CrossEntropy => {
            let mut y = Tensor::zeros(&[k, n]);
            for j in 0..n {
                y.set(rng.random_range(0..k), j, 1.0);
            }
            y
        }
    };
    let params = spec.init(seed);
    (Problem::new(spec, Batch::new(x, y).unwrap(), loss).unwrap(), params)
}

fn assert_close(a: &ParamVector, b: &ParamVector, rtol: f64) {
    let scale = 1.0 + b.norm();
    assert!(a.max_abs_diff(b) <= rtol * scale, "{a:?} vs {b:?}");
}

fn op(kind: CurvatureKind, p: &Problem, theta: &ParamVector) -> CurvatureOperator {
    CurvatureOperator::new(kind, p, theta).unwrap()
}

#[test]
fn linear_model_has_no_nme() {
    let (p, theta) = tiny(&[3, 2], ActivationSpec::gelu(), LossKind::Mse, 5, 1);
    let h = op(CurvatureKind::Hessian, &p, &theta);
    let v = ParamVector::new(normal_vec(&mut stream(2, 0), theta.len()));
    assert_close(&h.gnvp(&v).unwrap(), &h.hvp(&v).unwrap(), 1e-14);
    assert!(h.nmevp(&v).unwrap().as_slice().iter().all(|&x| x == 0.0));
}

#[test]
fn gnvp_matches_dense_assembly() {
    for loss in [LossKind::Mse, LossKind::CrossEntropy] {
        let (p, theta) = tiny(&[2, 4, 3], ActivationSpec::tanh(), loss, 4, 3);
        let o = op(CurvatureKind::GaussNewton, &p, &theta);
        let j = o.jacobian().unwrap();
        let gn = j.transpose() * o.output_hessian().unwrap() * &j / 4.0;
        let dense = full_matrix(&o, DEFAULT_DENSE_CAP).unwrap();
        assert!((&dense - &gn).abs().max() <= 1e-8 * gn.abs().max());
        let zero = o.gnvp(&ParamVector::zeros(theta.len())).unwrap();
        assert!(zero.as_slice().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn decomposition_and_both_nme_routes_agree() {
    let acts = [ActivationSpec::gelu(), ActivationSpec::tanh(), ActivationSpec::beta_gelu(3.0).unwrap()];
    for (i, act) in acts.into_iter().enumerate() {
        for loss in [LossKind::Mse, LossKind::CrossEntropy] {
            let (p, theta) = tiny(&[2, 5, 4, 2], act, loss, 3, 10 + i as u64);
            let o = op(CurvatureKind::Hessian, &p, &theta);
            let v = ParamVector::new(normal_vec(&mut stream(i as u64, 9), theta.len()));
            let h = o.hvp(&v).unwrap();
            let mut sum = o.gnvp(&v).unwrap();
            sum.axpy(1.0, &o.nmevp_direct(&v).unwrap());
            assert!(h.max_abs_diff(&sum) <= 1e-10 * (1.0 + h.norm()));
            assert_close(&o.nmevp_difference(&v).unwrap(), &o.nmevp_direct(&v).unwrap(), 1e-10);
        }
    }
}

#[test]
fn nme_vanishes_at_interpolation() {
    let (p, theta) = tiny(&[2, 6, 2], ActivationSpec::gelu(), LossKind::Mse, 4, 4);
    let fitted = Batch::new(p.batch.inputs.clone(), p.outputs(&theta).unwrap()).unwrap();
    let p = p.with_batch(fitted).unwrap();
    let o = op(CurvatureKind::Nme, &p, &theta);
    let v = ParamVector::new(normal_vec(&mut stream(4, 4), theta.len()));
    assert!(o.apply(&v).unwrap().as_slice().iter().all(|&x| x == 0.0));
}

#[test]
fn relu_same_layer_nme_block_is_zero() {
    let (p, theta) = tiny(&[2, 5, 2], ActivationSpec::relu(), LossKind::Mse, 3, 5);
    let o = op(CurvatureKind::Nme, &p, &theta);
    let nme = full_matrix(&o, DEFAULT_DENSE_CAP).unwrap();
    for l in 0..2 {
        let r = p.spec.weight_range(l);
        for i in r.clone() {
            for j in r.clone() {
                assert_eq!(nme[(i, j)], 0.0);
            }
        }
    }
    assert!(nme.abs().max() > 0.0);
}

#[test]
fn dense_extraction_properties() {
    let layout = ParamLayout::flat(2);
    let q = LossHessian::new(
        |t, ps| {
            let hm = t.constant(Tensor::matrix(2, 2, vec![2.0, 1.0, 1.0, 3.0]).unwrap());
            let hv = t.matmul(hm, ps[0])?;
            let d = t.dot(ps[0], hv)?;
            t.scale(d, 0.5)
        },
        &layout,
        &ParamVector::new(vec![0.3, -0.7]),
    )
    .unwrap();
    let h = full_matrix(&q, DEFAULT_DENSE_CAP).unwrap();
    assert_eq!(h, DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]));
    assert!(matches!(full_matrix(&q, 1), Err(crate::Error::CapExceeded { params: 2, cap: 1 })));

    let (p, theta) = tiny(&[2, 4, 2], ActivationSpec::gelu(), LossKind::CrossEntropy, 3, 6);
    let full = |k| full_matrix(&op(k, &p, &theta), DEFAULT_DENSE_CAP).unwrap();
    let (h, gn, nme) = (full(CurvatureKind::Hessian), full(CurvatureKind::GaussNewton), full(CurvatureKind::Nme));
    assert!(asymmetry(&h) <= 1e-8);
    assert!((&h - &gn - &nme).abs().max() <= 1e-8 * h.abs().max());
    assert!(symmetric_eigenvalues(&gn)[0] >= -1e-10);
}

#[test]
fn hutchinson_on_identity() {
    let id = DenseOperator(DMatrix::identity(3, 3));
    let small = hutchinson_trace(&id, 100, 1).unwrap();
    let big = hutchinson_trace(&id, 10_000, 1).unwrap();
    assert!((big.estimate - 3.0).abs() < 4.0 * big.stderr);
    assert!(big.stderr < small.stderr);
    assert!(hutchinson_trace(&id, 1, 1).unwrap().stderr.is_nan());
    assert!(hutchinson_trace(&id, 0, 1).is_err());
    assert_eq!(hutchinson_trace(&id, 50, 8).unwrap(), hutchinson_trace(&id, 50, 8).unwrap());
}

#[test]
fn hutchinson_matches_dense_trace() {
    let (p, theta) = tiny(&[2, 4, 2], ActivationSpec::tanh(), LossKind::Mse, 3, 7);
    let o = op(CurvatureKind::Hessian, &p, &theta);
    let exact = full_matrix(&o, DEFAULT_DENSE_CAP).unwrap().trace();
    let est = hutchinson_trace(&o, 1000, 3).unwrap();
    assert!((est.estimate - exact).abs() <= 4.0 * est.stderr);
}

#[test]
fn sampled_gn_trace_contract() {
    let (p, theta) = tiny(&[2, 3, 2], ActivationSpec::gelu(), LossKind::Mse, 2, 8);
    assert!(matches!(gn_trace_sampled(&p, &theta, 10, 0), Err(crate::Error::UnsupportedLoss(_))));

    let spec = ModelSpec::new(vec![1, 3], ActivationSpec::gelu()).unwrap();
    let batch = Batch::new(Tensor::matrix(1, 1, vec![1.0]).unwrap(), Tensor::matrix(3, 1, vec![0.0, 1.0, 0.0]).unwrap()).unwrap();
    let p = Problem::new(spec, batch, LossKind::CrossEntropy).unwrap();
    let theta = ParamVector::new(vec![0.0, 60.0, 0.0]);
    let est = gn_trace_sampled(&p, &theta, 20, 1).unwrap();
    let (_, g) = p.loss_and_grad(&theta).unwrap();
    assert!((est.estimate - g.dot(&g)).abs() <= 1e-12);
    assert!(est.estimate >= 0.0);
}

#[test]
fn fisher_check_contract() {
    let (lin, theta) = tiny(&[3, 2], ActivationSpec::gelu(), LossKind::Mse, 4, 9);
    let rep = fisher_check(&lin, &theta, 50, 2, DEFAULT_DENSE_CAP).unwrap();
    assert_eq!(rep.max_abs_deviation, 0.0);
    assert_eq!(rep.first_draw_nme_norm, 0.0);

    let (p, theta) = tiny(&[2, 3, 2], ActivationSpec::gelu(), LossKind::Mse, 2, 9);
    let one = fisher_check(&p, &theta, 1, 2, DEFAULT_DENSE_CAP).unwrap();
    assert!(one.first_draw_nme_norm > 0.0);
    let (ce, theta) = tiny(&[2, 3, 2], ActivationSpec::gelu(), LossKind::CrossEntropy, 2, 9);
    assert!(fisher_check(&ce, &theta, 1, 2, DEFAULT_DENSE_CAP).is_err());
}

#[test]
fn fisher_statistics_match_explicit_hessian_average() {
    let (p, theta) = tiny(&[2, 3, 2], ActivationSpec::tanh(), LossKind::Mse, 2, 12);
    let z = p.outputs(&theta).unwrap();
    let n = 5;
    let mut mean = DMatrix::zeros(theta.len(), theta.len());
    for s in 0..n {
        let y = sampled_regression_labels(&z, 77, s);
        let ps = p.with_batch(Batch::new(p.batch.inputs.clone(), y).unwrap()).unwrap();
        mean += full_matrix(&op(CurvatureKind::Hessian, &ps, &theta), DEFAULT_DENSE_CAP).unwrap();
    }
    mean /= n as f64;
    let gn = full_matrix(&op(CurvatureKind::GaussNewton, &p, &theta), DEFAULT_DENSE_CAP).unwrap();
    let rep = fisher_check(&p, &theta, n as usize, 77, DEFAULT_DENSE_CAP).unwrap();
    let explicit = (&mean - &gn).abs().max();
    assert!((explicit - rep.max_abs_deviation).abs() <= 1e-10 * (1.0 + explicit));
}

fn embed(spec: &ModelSpec, layer: usize, m: &Tensor) -> ParamVector {
    let mut v = ParamVector::zeros(spec.num_params());
    let r = spec.weight_range(layer);
    v.as_mut_slice()[r].copy_from_slice(m.data());
    v
}

fn ad_contraction(p: &Problem, theta: &ParamVector, l: usize, m: usize, a: &Tensor, b: &Tensor) -> Vec<f64> {
    let o = op(CurvatureKind::Hessian, p, theta);
    let k = p.spec.output_width();
    let (va, vb) = (embed(&p.spec, l, a), embed(&p.spec, m, b));
    (0..k)
        .map(|i| {
            let mut c = o.outputs().full_like(0.0);
            c.set(i, 0, 1.0);
            let col = o.tape().vjp_tangent(o.output_node(), &c, None, &vb).unwrap().1;
            col.dot(&va)
        })
        .collect()
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::matrix(rows, cols, normal_vec(&mut stream(seed, 5), rows * cols)).unwrap()
}

#[test]
fn analytic_second_derivative_matches_ad_depth_two() {
    let (p, theta) = tiny(&[2, 4, 3], ActivationSpec::gelu(), LossKind::Mse, 1, 13);
    let x = p.batch.inputs.column(0).into_data();
    for (l, m) in [(0, 0), (0, 1), (1, 1)] {
        let a = random_matrix(p.spec.widths[l + 1], p.spec.widths[l], 1);
        let b = random_matrix(p.spec.widths[m + 1], p.spec.widths[m], 2);
        let got = analytic_second_derivative(&p.spec, &theta, &x, l, m, &a, &b).unwrap();
        let want = ad_contraction(&p, &theta, l, m, &a, &b);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() <= 1e-6 * (1.0 + w.abs()), "l={l} m={m}: {g} vs {w}");
        }
        let zero = analytic_second_derivative(&p.spec, &theta, &x, l, m, &a.full_like(0.0), &b).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn analytic_diagonal_vanishes_without_second_derivative() {
    let (p, theta) = tiny(&[2, 4, 4, 2], ActivationSpec::diminished_gelu(), LossKind::Mse, 1, 14);
    let x = p.batch.inputs.column(0).into_data();
    for l in 0..3 {
        let a = random_matrix(p.spec.widths[l + 1], p.spec.widths[l], 3);
        let b = random_matrix(p.spec.widths[l + 1], p.spec.widths[l], 4);
        let got = analytic_second_derivative(&p.spec, &theta, &x, l, l, &a, &b).unwrap();
        assert!(got.data().iter().all(|&v| v == 0.0));
    }
    let biased = p.spec.clone().with_bias(true);
    let a = random_matrix(4, 2, 3);
    assert!(analytic_second_derivative(&biased, &biased.init(0), &x, 0, 0, &a, &a).is_err());
    assert!(analytic_second_derivative(&p.spec, &theta, &x, 1, 0, &a, &a).is_err());
}

#[test]
fn ntk_examples() {
    let (p, theta) = tiny(&[3, 4, 1], ActivationSpec::tanh(), LossKind::Mse, 1, 15);
    let k = ntk(&p, &theta).unwrap();
    let o = op(CurvatureKind::GaussNewton, &p, &theta);
    let gz = o.vjp(&Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
    assert_eq!(k.matrix.shape(), (1, 1));
    assert!((k.matrix[(0, 0)] - gz.dot(&gz)).abs() <= 1e-12 * gz.dot(&gz));

    let (p, theta) = tiny(&[2, 3, 2], ActivationSpec::gelu(), LossKind::Mse, 3, 16);
    let base = ntk(&p, &theta).unwrap();
    let dup = p.batch.select(&[0, 1, 2, 2]).unwrap();
    let bigger = ntk(&p.with_batch(dup).unwrap(), &theta).unwrap();
    assert_eq!(bigger.matrix.shape(), (8, 8));
    assert_eq!(bigger.rank(1e-10), base.rank(1e-10));
    assert!(symmetric_eigenvalues(&base.matrix)[0] >= -1e-10);
}

#[test]
fn ntk_spectrum_matches_gauss_newton() {
    for loss in [LossKind::Mse, LossKind::CrossEntropy] {
        let (p, theta) = tiny(&[2, 6, 3], ActivationSpec::gelu(), loss, 5, 17);
        let link = ntk_gn_spectra(&p, &theta, 1e-9).unwrap();
        assert!(!link.gn_side.is_empty());
        assert!(link.max_rel_error() <= 1e-8, "{link:?}");
        assert!(link.max_scaled_error() <= link.max_rel_error());
    }
}

#[test]
fn scan_examples() {
    let spec = ScanSpec { index_a: 0, index_b: 1, range_a: [-1.0, 1.0], range_b: [-1.0, 1.0], resolution: 4 };
    let (lin, theta) = tiny(&[2, 2], ActivationSpec::gelu(), LossKind::Mse, 3, 18);
    let g = nme_scan(&lin, &theta, &spec).unwrap();
    assert_eq!(g.resolution(), (4, 4));
    assert!(g.nme_norm.iter().all(|&v| v == 0.0));

    let (relu, theta) = tiny(&[2, 4, 1], ActivationSpec::relu(), LossKind::Mse, 3, 18);
    let g = nme_scan(&relu, &theta, &spec).unwrap();
    assert!(g.nme_norm.iter().all(|&v| v == 0.0));
    assert!(g.loss.iter().all(|v| v.is_finite()));

    let cross = ScanSpec { index_b: 9, ..spec.clone() };
    assert!(nme_scan(&relu, &theta, &cross).is_err());

    let (gelu, theta) = tiny(&[2, 4, 1], ActivationSpec::gelu(), LossKind::Mse, 3, 18);
    let g = nme_scan(&gelu, &theta, &spec).unwrap();
    assert!(g.census(1e-3) > 0.0);
    let mut csv = Vec::new();
    g.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 2 + 16);
}

fn smooth_activation() -> impl Strategy<Value = ActivationSpec> {
    prop_oneof![
        Just(ActivationSpec::gelu()),
        Just(ActivationSpec::tanh()),
        (0.5f64..8.0).prop_map(|b| ActivationSpec::beta_gelu(b).unwrap()),
        (0.5f64..8.0).prop_map(|b| ActivationSpec::augmented_relu(b).unwrap()),
        Just(ActivationSpec::diminished_gelu()),
    ]
}

fn any_loss() -> impl Strategy<Value = LossKind> {
    prop_oneof![Just(LossKind::Mse), Just(LossKind::CrossEntropy)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn hessian_splits_into_gn_plus_nme(act in smooth_activation(), loss in any_loss(), seed in 0u64..10_000) {
        let (p, theta) = tiny(&[2, 5, 3], act, loss, 3, seed);
        let h = op(CurvatureKind::Hessian, &p, &theta);
        let v = ParamVector::new(normal_vec(&mut stream(seed, 7), theta.len()));
        let sum = h.gnvp(&v).unwrap().plus(1.0, &h.nmevp_direct(&v).unwrap());
        assert_close(&sum, &h.hvp(&v).unwrap(), 1e-10);
    }

    #[test]
    fn curvature_products_are_symmetric(act in smooth_activation(), loss in any_loss(), seed in 0u64..10_000) {
        let (p, theta) = tiny(&[3, 4, 2], act, loss, 4, seed);
        let mut rng = stream(seed, 8);
        let u = ParamVector::new(normal_vec(&mut rng, theta.len()));
        let v = ParamVector::new(normal_vec(&mut rng, theta.len()));
        for kind in [CurvatureKind::Hessian, CurvatureKind::GaussNewton, CurvatureKind::Nme] {
            let o = op(kind, &p, &theta);
            let (uv, vu) = (u.dot(&o.apply(&v).unwrap()), v.dot(&o.apply(&u).unwrap()));
            prop_assert!((uv - vu).abs() <= 1e-10 * (1.0 + uv.abs()), "{kind:?}: {uv} vs {vu}");
        }
    }

    #[test]
    fn gauss_newton_is_psd(loss in any_loss(), seed in 0u64..10_000) {
        let (p, theta) = tiny(&[2, 6, 3], ActivationSpec::relu(), loss, 5, seed);
        let o = op(CurvatureKind::GaussNewton, &p, &theta);
        let v = ParamVector::new(normal_vec(&mut stream(seed, 9), theta.len()));
        let q = v.dot(&o.gnvp(&v).unwrap());
        prop_assert!(q >= -1e-12 * v.dot(&v), "vᵀGv = {q}");
        let hz = o.output_hessian().unwrap();
        prop_assert!(symmetric_eigenvalues(&hz)[0] >= -1e-12 * (1.0 + hz.abs().max()));
    }
}
