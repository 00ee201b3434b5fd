use nalgebra::DMatrix;
use proptest::prelude::*;

use super::*;
use crate::regularize::{grad_penalty_step, sam_step};
use crate::tape::ParamVector;

#[test]
fn evolve_examples() {
    let p = QuadraticProblem::diagonal(vec![5.0], vec![1.0], 0.1, 0.0).unwrap();
    let tr = p.evolve(2);
    assert_eq!(tr.thetas[0], vec![1.0]);
    assert!((tr.thetas[2][0] - 0.25).abs() < 1e-15);

    assert!((mode_factor(2.0, 0.1, 0.05) - 0.78).abs() < 1e-15);
    let p = QuadraticProblem::diagonal(vec![2.0], vec![1.0], 0.1, 0.05).unwrap();
    assert!((p.evolve(1).thetas[1][0] - 0.78).abs() < 1e-15);
    assert_eq!(p.evolve(0).thetas, vec![vec![1.0]]);
}

#[test]
fn rejects_invalid_curvature() {
    assert!(QuadraticProblem::diagonal(vec![-1.0], vec![1.0], 0.1, 0.0).is_err());
    assert!(QuadraticProblem::diagonal(vec![1.0, 2.0], vec![1.0], 0.1, 0.0).is_err());
    let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
    assert!(QuadraticProblem::dense(&asym, vec![1.0, 1.0], 0.1, 0.0).is_err());
    let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    assert!(QuadraticProblem::dense(&indefinite, vec![1.0, 1.0], 0.1, 0.0).is_err());
    let nearly = DMatrix::from_row_slice(2, 2, &[1.0, 0.5 + 5e-13, 0.5, 1.0]);
    assert!(QuadraticProblem::dense(&nearly, vec![1.0, 1.0], 0.1, 0.0).is_ok());
}

fn dense_problem(rho: f64) -> QuadraticProblem {
    let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, -0.4, 0.0, 0.8, 0.3, 0.5, -0.1, 0.6]);
    let h = &a * a.transpose();
    let h = (&h + h.transpose()) * 0.5;
    QuadraticProblem::dense(&h, vec![1.0, -0.5, 2.0], 0.2, rho).unwrap()
}

#[test]
fn eigenbasis_and_explicit_paths_agree() {
    let p = dense_problem(0.3);
    assert!(p.evolve(60).max_abs_diff(&p.evolve_explicit(60)) < 1e-12);
    let d = QuadraticProblem::diagonal(vec![0.5, 3.0], vec![1.0, 1.0], 0.1, 0.2).unwrap();
    assert!(d.evolve(60).max_abs_diff(&d.evolve_explicit(60)) < 1e-14);
}

#[test]
fn grad_penalty_p2_follows_closed_form() {
    for p in [QuadraticProblem::diagonal(vec![0.3, 2.0, 4.5], vec![1.0, -1.0, 0.5], 0.1, 0.2).unwrap(), dense_problem(0.2)]
    {
        let closed = p.evolve(100);
        let obj = p.objective();
        let mut th = ParamVector::new(p.theta0.clone());
        for t in 1..=100 {
            grad_penalty_step(&obj, &mut th, p.lr, p.rho / 2.0, 2, 1e-12).unwrap();
            let diff = th.as_slice().iter().zip(&closed.thetas[t]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "step {t}: {diff}");
        }
    }
}

#[test]
fn usam_follows_closed_form() {
    for p in [QuadraticProblem::diagonal(vec![0.3, 2.0, 4.5], vec![1.0, -1.0, 0.5], 0.1, 0.2).unwrap(), dense_problem(0.2)]
    {
        let closed = p.evolve(100);
        let obj = p.objective();
        let mut th = ParamVector::new(p.theta0.clone());
        for t in 1..=100 {
            sam_step(&obj, &mut th, p.lr, p.rho, false, 1e-12).unwrap();
            let diff = th.as_slice().iter().zip(&closed.thetas[t]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "step {t}: {diff}");
        }
    }
}

#[test]
fn residual_examples() {
    let r = step_doubling_residual(0.01, 1.0);
    assert!(((r - 1.0025e-6) / 1.0025e-6).abs() < 1e-14, "{r:e}");
    let r = step_doubling_residual(2.0, 0.5);
    assert!((r - 1.25).abs() < 1e-14);
    let small = step_doubling_residual(1e-3, 1.0);
    let smaller = step_doubling_residual(1e-4, 1.0);
    assert!(((small / smaller) / 1e3 - 1.0).abs() < 1e-3);
}

#[test]
fn residual_table_csv() {
    let rows = residual_table(&[0.01, 0.1, 1.0], 1.0);
    assert!(rows.iter().all(|r| r.rel_diff < 1e-14));
    let mut buf = Vec::new();
    write_residual_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with(RESIDUAL_CSV_SCHEMA));
    assert_eq!(text.lines().count(), 5);

    let mut buf = Vec::new();
    QuadraticProblem::diagonal(vec![1.0, 2.0], vec![1.0, 1.0], 0.1, 0.0).unwrap().evolve(3).write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2 + 4 * 2);
}

proptest! {
    #[test]
    fn residual_matches_expansion(log_al in -4.0f64..1.0, lr in 0.01f64..2.0) {
        let lambda = 10f64.powf(log_al) / lr;
        let r = step_doubling_residual(lambda, lr);
        let s = step_doubling_series(lambda, lr);
        prop_assert!(((r - s) / s).abs() < 1e-14, "{} vs {}", r, s);
    }

    #[test]
    fn zero_penalty_is_plain_gd(lambda in 0.0f64..10.0, lr in 0.0f64..0.2, theta in -5.0f64..5.0) {
        let p = QuadraticProblem::diagonal(vec![lambda], vec![theta], lr, 0.0).unwrap();
        let tr = p.evolve(5);
        let expect = theta * (1.0 - lr * lambda).powi(5);
        prop_assert!((tr.thetas[5][0] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
    }
}
