use std::fs;

use super::*;
use crate::curvature::{full_matrix, CurvatureKind, CurvatureOperator, DEFAULT_DENSE_CAP};
use crate::nn::{ActivationSpec, Checkpoint, LossKind, ModelSpec, Problem};
use crate::regularize::{LrSchedule, RegularizerKind, RegularizerSpec};
use crate::tape::Tensor;

fn blobs_config(seed: u64) -> RunConfig {
    RunConfig {
        data: DataConfig::Synthetic(SyntheticSpec::new(SyntheticKind::Blobs, 60, 2, 2, 3)),
        hidden: vec![6],
        activation: ActivationSpec::gelu(),
        bias: true,
        loss: LossKind::CrossEntropy,
        regularizer: RegularizerSpec::default(),
        lr: 0.1,
        lr_schedule: LrSchedule::Constant,
        epochs: 2,
        batch_size: 10,
        seed,
        out_dir: None,
    }
}

#[test]
fn synthetic_is_deterministic_and_valid() {
    for kind in [SyntheticKind::Blobs, SyntheticKind::Spirals, SyntheticKind::TeacherMlp] {
        let spec = SyntheticSpec::new(kind, 50, 3, 2, 7);
        let a = make_synthetic(&spec).unwrap();
        let b = make_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.indices(Split::Test).len(), 10);
        a.validate().unwrap();
        let bytes = |d: &Dataset| d.inputs.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
        assert_eq!(bytes(&a), bytes(&b));
    }
    assert!(make_synthetic(&SyntheticSpec::new(SyntheticKind::Blobs, 0, 2, 2, 0)).is_err());
    assert!(make_synthetic(&SyntheticSpec::new(SyntheticKind::Spirals, 10, 1, 2, 0)).is_err());
}

#[test]
fn dataset_rejects_bad_targets() {
    let x = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
    let y = Tensor::matrix(2, 2, vec![1.0, 0.5, 0.0, 0.5]).unwrap();
    assert!(Dataset::new(x.clone(), y, vec![Split::Train; 2], Some(2)).is_err());
    let mut nan = Tensor::zeros(&[1, 2]);
    nan.set(0, 0, f64::NAN);
    assert!(Dataset::new(x.clone(), nan, vec![Split::Train; 2], None).is_err());
    let ok = Tensor::matrix(1, 2, vec![0.3, 0.1]).unwrap();
    assert!(Dataset::new(x, ok, vec![Split::Train], None).is_err());
}

/// Logistic regression by plain gradient descent, independent of the
/// training driver.
#[test]
fn blobs_are_linearly_separable() {
    let ds = make_synthetic(&SyntheticSpec::new(SyntheticKind::Blobs, 400, 2, 2, 11).with_test_fraction(0.0)).unwrap();
    let mut w = [0.0f64; 3];
    let n = ds.len();
    for _ in 0..300 {
        let mut g = [0.0; 3];
        for j in 0..n {
            let (x0, x1) = (ds.inputs.get(0, j), ds.inputs.get(1, j));
            let y = ds.targets.get(1, j);
            let p = 1.0 / (1.0 + (-(w[0] * x0 + w[1] * x1 + w[2])).exp());
            for (gi, xi) in g.iter_mut().zip([x0, x1, 1.0]) {
                *gi += (p - y) * xi / n as f64;
            }
        }
        for (wi, gi) in w.iter_mut().zip(g) {
            *wi -= 0.5 * gi;
        }
    }
    let correct = (0..n)
        .filter(|&j| {
            let s = w[0] * ds.inputs.get(0, j) + w[1] * ds.inputs.get(1, j) + w[2];
            (s > 0.0) == (ds.targets.get(1, j) == 1.0)
        })
        .count();
    assert!(correct as f64 / n as f64 >= 0.99, "{correct}/{n}");
}

#[test]
fn teacher_weights_give_zero_loss() {
    let ds = make_synthetic(&SyntheticSpec::new(SyntheticKind::TeacherMlp, 20, 3, 2, 5)).unwrap();
    let (spec, params) = ds.teacher.clone().unwrap();
    let p = Problem::new(spec, ds.full_batch().unwrap(), LossKind::Mse).unwrap();
    assert_eq!(p.loss(&params).unwrap(), 0.0);
}

fn fixture() -> (IdxArray, IdxArray) {
    let pixels: Vec<u8> = (0..2 * 784).map(|i| (i % 256) as u8).collect();
    (IdxArray::new(vec![2, 28, 28], pixels).unwrap(), IdxArray::new(vec![2], vec![3, 7]).unwrap())
}

#[test]
fn idx_fixture_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = fixture();
    let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    write_idx(&ip, &img).unwrap();
    write_idx(&lp, &lab).unwrap();
    let ds = load_idx(&ip, &lp, 10, Split::Train).unwrap();
    assert_eq!(ds.inputs.dims(), (784, 2));
    assert_eq!(ds.inputs.get(255, 0), 1.0);
    assert_eq!(ds.targets.get(7, 1), 1.0);

    let again = dir.path().join("again.idx");
    write_idx(&again, &read_idx(&ip).unwrap()).unwrap();
    assert_eq!(fs::read(&ip).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn idx_errors_are_descriptive() {
    let (img, _) = fixture();
    let bytes = img.to_bytes();
    let err = IdxArray::parse(&bytes[..bytes.len() - 5]).unwrap_err().to_string();
    assert!(err.contains(&format!("{}", bytes.len())) && err.contains(&format!("{}", bytes.len() - 5)), "{err}");
    let mut bad = bytes.clone();
    bad[1] = 1;
    assert!(IdxArray::parse(&bad).unwrap_err().to_string().contains("magic"));
    let lab = IdxArray::new(vec![2], vec![3, 12]).unwrap();
    assert!(dataset_from_idx(&img, &lab, 10, Split::Train).is_err());
}

#[test]
fn config_requires_seed_and_hashes_stably() {
    let cfg = blobs_config(4);
    let mut json = serde_json::to_value(&cfg).unwrap();
    let back = RunConfig::from_json(&json.to_string()).unwrap();
    assert_eq!(back, cfg);
    json.as_object_mut().unwrap().remove("seed");
    assert!(RunConfig::from_json(&json.to_string()).is_err());

    let mut moved = cfg.clone();
    moved.out_dir = Some("elsewhere".into());
    assert_eq!(moved.hash(), cfg.hash());
    assert_ne!(blobs_config(5).hash(), cfg.hash());
}

#[test]
fn zero_strength_regularizers_share_a_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let mut reference = None;
    for kind in RegularizerKind::ALL {
        let mut cfg = blobs_config(8);
        cfg.regularizer = RegularizerSpec::new(kind);
        let out = dir.path().join(format!("{kind:?}"));
        let run = train(&cfg, &out).unwrap();
        let steps = fs::read_to_string(out.join(STEPS_FILE)).unwrap();
        let losses: Vec<String> =
            steps.lines().skip(2).map(|l| l.split(',').nth(3).unwrap().to_string()).collect();
        match &reference {
            None => reference = Some((run.model.params, losses)),
            Some((params, l)) => {
                assert_eq!(&run.model.params, params, "{kind:?}");
                assert_eq!(&losses, l, "{kind:?}");
            }
        }
    }
}

#[test]
fn train_writes_versioned_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = blobs_config(1);
    let run = train(&cfg, dir.path()).unwrap();
    assert_eq!(run.summary.status, RunStatus::Completed);
    assert_eq!(run.summary.steps, 2 * 5);
    let steps = fs::read_to_string(dir.path().join(STEPS_FILE)).unwrap();
    assert!(steps.starts_with(STEPS_CSV_SCHEMA));
    assert_eq!(steps.lines().count(), 2 + 10);
    let epochs = fs::read_to_string(dir.path().join(EPOCHS_FILE)).unwrap();
    assert!(epochs.starts_with(EPOCHS_CSV_SCHEMA));
    let summary: RunSummary =
        serde_json::from_str(&fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary.schema_version, SUMMARY_VERSION);
    assert_eq!(summary.config_hash, cfg.hash());
    let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.params, run.model.params);

    let again = tempfile::tempdir().unwrap();
    let rerun = train(&cfg, again.path()).unwrap();
    assert_eq!(rerun.summary.untimed(), run.summary.untimed());
}

#[test]
fn divergence_keeps_rows_and_marks_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = blobs_config(2);
    cfg.data = DataConfig::Synthetic(SyntheticSpec::new(SyntheticKind::TeacherMlp, 40, 2, 1, 3));
    cfg.loss = LossKind::Mse;
    cfg.lr = 1e6;
    cfg.epochs = 20;
    let run = train(&cfg, dir.path()).unwrap();
    assert_eq!(run.summary.status, RunStatus::Diverged);
    let d = run.summary.divergence.unwrap();
    assert!(dir.path().join(DIVERGED_FILE).exists());
    assert!(!dir.path().join(CHECKPOINT_FILE).exists());
    let steps = fs::read_to_string(dir.path().join(STEPS_FILE)).unwrap();
    let rows: Vec<&str> = steps.lines().skip(2).collect();
    assert!(rows.len() == d.step || rows.len() == d.step + 1, "{} rows, diverged at {}", rows.len(), d.step);
    for (i, row) in rows.iter().enumerate() {
        assert!(row.starts_with(&format!("{i},")), "{row}");
    }
}

#[test]
fn sweep_emits_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = blobs_config(3);
    base.regularizer = RegularizerSpec::new(RegularizerKind::GradPenaltyP2);
    base.epochs = 1;
    let cfg: SweepConfig = serde_json::from_value(serde_json::json!({ "base": base })).unwrap();
    let rows = sweep(&cfg, dir.path()).unwrap();
    assert_eq!(rows.len(), 8);
    let csv = fs::read_to_string(dir.path().join(SWEEP_FILE)).unwrap();
    assert!(csv.starts_with(SWEEP_CSV_SCHEMA));
    assert_eq!(csv.lines().count(), 2 + 8);
    assert!(rows.iter().all(|r| r.status == RunStatus::Completed));
    assert_eq!(rows[0].activation, "relu");
    assert_eq!(rows[7].rho, 0.1);
}

#[test]
fn probes_match_dense_oracles() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ModelSpec::new(vec![2, 4, 3], ActivationSpec::gelu()).unwrap();
    let ds = make_synthetic(&SyntheticSpec::new(SyntheticKind::Blobs, 5, 2, 3, 1).with_test_fraction(0.0)).unwrap();
    let p = Problem::new(spec.clone(), ds.full_batch().unwrap(), LossKind::CrossEntropy).unwrap();
    let theta = spec.init(2);
    let opts = ProbeOptions { n_samples: 20_000, seed: 4, ..ProbeOptions::default() };
    let rep = probe(ProbeKind::Traces, &p, &theta, &opts, dir.path()).unwrap();
    let get = |q: &str| rep.rows.iter().find(|r| r.quantity == q).unwrap().clone();
    let dense_h = full_matrix(&CurvatureOperator::new(CurvatureKind::Hessian, &p, &theta).unwrap(), DEFAULT_DENSE_CAP)
        .unwrap()
        .trace();
    let dense_gn =
        full_matrix(&CurvatureOperator::new(CurvatureKind::GaussNewton, &p, &theta).unwrap(), DEFAULT_DENSE_CAP)
            .unwrap()
            .trace();
    let h = get("hessian_trace_hutchinson");
    assert!((h.value - dense_h).abs() < 4.0 * h.stderr.unwrap());
    let s = get("gn_trace_sampled_label");
    assert!((s.value - dense_gn).abs() < 4.0 * s.stderr.unwrap());
    assert!(dir.path().join("traces.csv").exists() && dir.path().join("traces.json").exists());

    let rep = probe(ProbeKind::Ntk, &p, &theta, &opts, dir.path()).unwrap();
    assert_eq!(rep.rows.iter().find(|r| r.quantity == "ntk_size").unwrap().value, 15.0);
    assert!(rep.rows.iter().find(|r| r.quantity == "ntk_eig_min").unwrap().value > -1e-10);

    probe(ProbeKind::Spectra, &p, &theta, &opts, dir.path()).unwrap();
    assert!(fs::read_to_string(dir.path().join("spectra_eigenvalues.csv")).unwrap().starts_with(SPECTRA_CSV_SCHEMA));
    let small_cap = ProbeOptions { cap: 3, ..opts };
    assert!(probe(ProbeKind::Spectra, &p, &theta, &small_cap, dir.path()).is_err());
}

#[test]
fn scan_census_drops_with_beta() {
    let c = census_by_beta(&[1.0, 8.0]).unwrap();
    assert!(c[0] > c[1], "{c:?}");
}

#[test]
fn interpolation_fit_reaches_target() {
    let ds = make_synthetic(&SyntheticSpec::new(SyntheticKind::TeacherMlp, 6, 2, 1, 9).with_test_fraction(0.0)).unwrap();
    let spec = ModelSpec::new(vec![2, 12, 1], ActivationSpec::tanh()).unwrap();
    let p = Problem::new(spec.clone(), ds.full_batch().unwrap(), LossKind::Mse).unwrap();
    let theta = fit_to_interpolation(&p, &spec.init(1), 1e-20, 100).unwrap();
    assert!(p.loss(&theta).unwrap() < 1e-20);
}

#[test]
fn check_table_is_complete() {
    assert_eq!(CHECKS.len(), 12);
    assert!(CHECKS.iter().enumerate().all(|(i, c)| c.id as usize == i + 1));
    assert!(run_check(13).is_err());
    assert!(!check_info(11).unwrap().gating);
}
