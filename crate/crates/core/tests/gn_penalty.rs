use nmekit::curvature::{full_matrix, CurvatureKind, CurvatureOperator, DEFAULT_DENSE_CAP};
use nmekit::nn::{ActivationSpec, Batch, LossKind, ModelSpec, Problem};
use nmekit::regularize::gn_trace_penalty_gradient;
use nmekit::rng::{normal_vec, stream};
use nmekit::tape::{ParamVector, Tensor};

fn problem() -> (Problem, ParamVector) {
    let spec = ModelSpec::new(vec![2, 3, 3], ActivationSpec::gelu()).unwrap();
    let x = Tensor::matrix(2, 3, normal_vec(&mut stream(4, 1), 6)).unwrap();
    let y = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let p = Problem::new(spec.clone(), Batch::new(x, y).unwrap(), LossKind::CrossEntropy).unwrap();
    (p, spec.init(4))
}

fn central_difference(f: impl Fn(&ParamVector) -> f64, th: &ParamVector) -> ParamVector {
    let h = 1e-5;
    ParamVector::new(
        (0..th.len())
            .map(|i| {
                let e = ParamVector::basis(th.len(), i);
                (f(&th.plus(h, &e)) - f(&th.plus(-h, &e))) / (2.0 * h)
            })
            .collect(),
    )
}

/// The label-sampled penalty gradient converges to the gradient of
/// `tr(Jᵀ H_z J)` with the output Hessian held at its current value.
#[test]
fn penalty_gradient_matches_frozen_output_hessian_trace() {
    let (p, th) = problem();
    let hz = CurvatureOperator::new(CurvatureKind::GaussNewton, &p, &th).unwrap().output_hessian().unwrap();
    let n = p.batch.len() as f64;
    let frozen = |t: &ParamVector| {
        let j = CurvatureOperator::new(CurvatureKind::GaussNewton, &p, t).unwrap().jacobian().unwrap();
        (j.transpose() * &hz * &j).trace() / n
    };
    let exact = full_matrix(&CurvatureOperator::new(CurvatureKind::GaussNewton, &p, &th).unwrap(), DEFAULT_DENSE_CAP)
        .unwrap()
        .trace();
    assert!((frozen(&th) - exact).abs() < 1e-12);
    let oracle = central_difference(frozen, &th);
    for straight_through in [false, true] {
        let g = gn_trace_penalty_gradient(&p, &th, 20_000, 1, straight_through).unwrap().0;
        let rel = g.plus(-1.0, &oracle).norm() / oracle.norm();
        assert!(rel < 0.1, "straight_through={straight_through}: rel {rel}");
    }
}
