use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Checkpoint, LossKind, Model, Problem};
use crate::rng::stream;
use crate::tape::ParamVector;

use super::config::RunConfig;
use super::dataset::{accuracy, Dataset, Split};

pub const STEPS_CSV_SCHEMA: &str = "# nmekit train-steps v1";
pub const EPOCHS_CSV_SCHEMA: &str = "# nmekit train-epochs v1";
pub const SUMMARY_VERSION: u32 = 1;

pub const STEPS_FILE: &str = "steps.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const DIVERGED_FILE: &str = "DIVERGED";

const SHUFFLE_STREAM: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
}

impl RunStatus {
    pub fn name(self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::Diverged => "diverged",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub status: RunStatus,
    pub steps: usize,
    pub epochs_completed: usize,
    pub train: Option<SplitMetrics>,
    pub test: Option<SplitMetrics>,
    pub divergence: Option<Divergence>,
    pub wall_time_s: f64,
}

impl RunSummary {
    /// The summary with wall time zeroed, for reproducibility comparisons.
    pub fn untimed(&self) -> Self {
        Self { wall_time_s: 0.0, ..self.clone() }
    }
}

pub struct RunOutcome {
    pub summary: RunSummary,
    pub model: Model,
}

/// Per-step seed for the regularizer's sampling.
pub fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(step as u64 + 1))
}

fn evaluate(problem: &Problem, params: &ParamVector) -> Result<SplitMetrics> {
    let z = problem.outputs(params)?;
    let loss = problem.loss(params)?;
    let acc = (problem.loss == LossKind::CrossEntropy).then(|| accuracy(&z, &problem.batch.targets));
    Ok(SplitMetrics { loss, accuracy: acc })
}

fn csv_with_schema(path: &Path, schema: &str) -> Result<csv::Writer<BufWriter<File>>> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{schema}")?;
    Ok(csv::Writer::from_writer(f))
}

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

/// Runs `config`, writing step and epoch CSVs, a checkpoint and a summary
/// into `out`.
///
/// A non-finite loss or parameter stops the run; rows already written stay
/// intact and a `DIVERGED` marker is written next to them.
pub fn train(config: &RunConfig, out: &Path) -> Result<RunOutcome> {
    let data = config.data.load()?;
    train_on(config, &data, out)
}

pub fn train_on(config: &RunConfig, data: &Dataset, out: &Path) -> Result<RunOutcome> {
    config.validate()?;
    let started = Instant::now();
    fs::create_dir_all(out)?;
    let _ = fs::remove_file(out.join(DIVERGED_FILE));
    let spec = config.model_spec(data)?;
    let train_batch = data
        .batch(Split::Train)?
        .ok_or_else(|| Error::InvalidArgument("dataset has no training samples".into()))?;
    let train_problem = Problem::new(spec.clone(), train_batch.clone(), config.loss)?;
    let test_problem = match data.batch(Split::Test)? {
        Some(b) => Some(Problem::new(spec.clone(), b, config.loss)?),
        None => None,
    };

    let mut theta = spec.init(config.seed);
    let n = train_batch.len();
    let bs = config.batch_size.min(n);
    let per_epoch = n.div_ceil(bs);
    let total = per_epoch * config.epochs;

    let mut steps_csv = csv_with_schema(&out.join(STEPS_FILE), STEPS_CSV_SCHEMA)?;
    steps_csv.write_record([
        "step", "epoch", "lr", "loss", "penalty", "grad_norm", "penalty_term_norm", "samples_used", "skipped",
    ])?;
    let mut epochs_csv = csv_with_schema(&out.join(EPOCHS_FILE), EPOCHS_CSV_SCHEMA)?;
    epochs_csv.write_record(["epoch", "train_loss", "train_accuracy", "test_loss", "test_accuracy"])?;
    steps_csv.flush()?;
    epochs_csv.flush()?;

    let mut step = 0;
    let mut divergence = None;
    let mut epochs_completed = 0;
    let mut last = (None, None);
    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(config.seed, SHUFFLE_STREAM + epoch as u64));
        for chunk in order.chunks(bs) {
            let problem = train_problem.with_batch(train_batch.select(chunk)?)?;
            let lr = config.lr_schedule.lr(config.lr, step, total);
            let report = match config.regularizer.step(&problem, &mut theta, lr, step_seed(config.seed, step)) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => {
                    divergence = Some(Divergence { step, loss: f64::NAN });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            steps_csv.write_record([
                step.to_string(),
                epoch.to_string(),
                fmt(lr),
                fmt(report.base_loss),
                fmt(report.penalty),
                fmt(report.grad_norm),
                fmt(report.penalty_term_norm),
                report.samples_used.to_string(),
                report.skipped.to_string(),
            ])?;
            steps_csv.flush()?;
            if !report.base_loss.is_finite() || !theta.is_finite() {
                let loss = if report.base_loss.is_finite() { f64::NAN } else { report.base_loss };
                divergence = Some(Divergence { step, loss });
                break 'epochs;
            }
            step += 1;
        }
        let metrics = evaluate(&train_problem, &theta)
            .and_then(|tr| Ok((tr, test_problem.as_ref().map(|p| evaluate(p, &theta)).transpose()?)));
        let (tr, te) = match metrics {
            Ok(m) => m,
            Err(Error::NonFinite(_)) => {
                divergence = Some(Divergence { step, loss: f64::NAN });
                break;
            }
            Err(e) => return Err(e),
        };
        epochs_csv.write_record([
            epoch.to_string(),
            fmt(tr.loss),
            opt(tr.accuracy),
            opt(te.as_ref().map(|m| m.loss)),
            opt(te.as_ref().and_then(|m| m.accuracy)),
        ])?;
        epochs_csv.flush()?;
        if !tr.loss.is_finite() {
            divergence = Some(Divergence { step, loss: tr.loss });
            break;
        }
        epochs_completed += 1;
        last = (Some(tr), te);
    }

    let model = Model::new(spec, theta)?;
    let status = if let Some(d) = divergence {
        fs::write(out.join(DIVERGED_FILE), serde_json::to_string_pretty(&d)? + "\n")?;
        RunStatus::Diverged
    } else {
        Checkpoint::new(&model, Some(config.seed)).save(&out.join(CHECKPOINT_FILE))?;
        RunStatus::Completed
    };
    let summary = RunSummary {
        schema_version: SUMMARY_VERSION,
        config_hash: config.hash(),
        seed: config.seed,
        status,
        steps: step,
        epochs_completed,
        train: last.0,
        test: last.1,
        divergence,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(RunOutcome { summary, model })
}
