use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use nmekit::curvature::{nme_scan, ScanSpec};
use nmekit::harness::{
    self, default_scan, probe, sweep, train, verify, CheckOutcome, Dataset, ProbeKind, ProbeOptions, RunConfig,
    RunStatus, Split, SweepConfig, CHECKS,
};
use nmekit::nn::{ActivationSpec, Batch, Checkpoint, Problem};
use nmekit::quadratic::{residual_table, write_residual_csv, QuadraticProblem};
use nmekit::tape::ParamVector;

#[derive(Parser)]
#[command(name = "nmekit", version, about = "Curvature probes, regularized training and verification for small MLPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a grid of configurations in parallel.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the seed axis with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Probe curvature of a checkpoint on a batch drawn from a run config.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// traces, spectra, scan or ntk.
        #[arg(long)]
        kind: ProbeKind,
        /// Probe options as JSON.
        #[arg(long)]
        options: Option<PathBuf>,
        /// Number of training samples in the probe batch.
        #[arg(long, default_value_t = 32)]
        max_batch: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// NME landscape scans, optionally across several β values.
    Scan {
        #[arg(long)]
        config: PathBuf,
        /// Parameters to scan; a fresh initialization is used when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scan grid as JSON; defaults to ±1 around the first two weights.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Comma-separated β values; each replaces the activation's β.
        #[arg(long, value_delimiter = ',')]
        betas: Vec<f64>,
        #[arg(long, default_value_t = 1e-3)]
        threshold: f64,
        #[arg(long, default_value_t = 32)]
        max_batch: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form penalized GD on a quadratic and step-doubling residuals.
    Quadratic {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Evolve by explicit matrix products instead of the eigenbasis.
        #[arg(long)]
        explicit: bool,
        /// λ values for the residual table; defaults to the problem's eigenvalues.
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the verification checks.
    Verify {
        /// Comma-separated check ids; all when omitted.
        #[arg(long, value_delimiter = ',')]
        checks: Vec<u8>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_run_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if out.is_some() {
        cfg.out_dir = out;
    }
    Ok(cfg)
}

fn out_dir(cfg_out: Option<PathBuf>, flag: Option<PathBuf>, fallback: &str) -> PathBuf {
    flag.or(cfg_out).unwrap_or_else(|| PathBuf::from(fallback))
}

fn probe_batch(data: &Dataset, max_batch: usize) -> Result<Batch> {
    let train = data.batch(Split::Train)?.context("dataset has no training samples")?;
    let idx: Vec<usize> = (0..train.len().min(max_batch)).collect();
    Ok(train.select(&idx)?)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = load_run_config(&config, seed, out)?;
            let dir = out_dir(cfg.out_dir.clone(), None, "runs/train");
            let run = train(&cfg, &dir)?;
            println!("{}", serde_json::to_string_pretty(&run.summary)?);
            if run.summary.status == RunStatus::Diverged {
                eprintln!("run diverged; partial logs in {}", dir.display());
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Sweep { config, seed, out } => {
            let mut cfg: SweepConfig = read_json(&config)?;
            if let Some(s) = seed {
                cfg.base.seed = s;
                cfg.seeds = vec![s];
            }
            let dir = out_dir(cfg.base.out_dir.clone(), out, "runs/sweep");
            let rows = sweep(&cfg, &dir)?;
            let diverged = rows.iter().filter(|r| r.status == RunStatus::Diverged).count();
            println!("{} cells, {diverged} diverged; summary in {}", rows.len(), dir.join(harness::SWEEP_FILE).display());
        }
        Command::Probe { config, checkpoint, kind, options, max_batch, seed, out } => {
            let cfg = load_run_config(&config, None, None)?;
            let mut opts: ProbeOptions = match options {
                Some(p) => read_json(&p)?,
                None => ProbeOptions::default(),
            };
            if let Some(s) = seed {
                opts.seed = s;
            }
            let model = Checkpoint::load(&checkpoint)?.into_model()?;
            let batch = probe_batch(&cfg.data.load()?, max_batch)?;
            let problem = Problem::new(model.spec.clone(), batch, cfg.loss)?;
            let dir = out_dir(None, out, "runs/probe");
            let report = probe(kind, &problem, &model.params, &opts, &dir)?;
            for row in &report.rows {
                match row.stderr {
                    Some(se) => println!("{:<32} {:>14.6e} ± {:.2e}", row.quantity, row.value, se),
                    None => println!("{:<32} {:>14.6e}", row.quantity, row.value),
                }
            }
        }
        Command::Scan { config, checkpoint, grid, betas, threshold, max_batch, seed, out } => {
            let cfg = load_run_config(&config, seed, None)?;
            let data = cfg.data.load()?;
            let batch = probe_batch(&data, max_batch)?;
            let (base_spec, params): (_, ParamVector) = match &checkpoint {
                Some(p) => {
                    let m = Checkpoint::load(p)?.into_model()?;
                    (m.spec, m.params)
                }
                None => {
                    let spec = cfg.model_spec(&data)?;
                    let params = spec.init(cfg.seed);
                    (spec, params)
                }
            };
            let scan: ScanSpec = match grid {
                Some(p) => read_json(&p)?,
                None => default_scan(&params),
            };
            if !betas.is_empty() && !base_spec.activation.kind.uses_beta() {
                bail!("--betas needs a beta_gelu or augmented_relu activation");
            }
            let betas = if betas.is_empty() { vec![base_spec.activation.beta] } else { betas };
            let dir = out_dir(None, out, "runs/scan");
            fs::create_dir_all(&dir)?;
            let mut census = Vec::new();
            for beta in betas {
                let mut spec = base_spec.clone();
                spec.activation = ActivationSpec::new(spec.activation.kind, beta)?;
                let problem = Problem::new(spec, batch.clone(), cfg.loss)?;
                let g = nme_scan(&problem, &params, &scan)?;
                let file = dir.join(format!("scan_beta{beta}.csv"));
                g.write_csv(BufWriter::new(File::create(&file)?))?;
                let c = g.census(threshold);
                println!("β={beta}: census {c:.4} above {threshold:e} -> {}", file.display());
                census.push(serde_json::json!({ "beta": beta, "census": c, "file": file }));
            }
            write_json(
                &dir.join("scan_summary.json"),
                &serde_json::json!({ "schema_version": 1, "threshold": threshold, "scan": scan, "grids": census }),
            )?;
        }
        Command::Quadratic { config, steps, explicit, lambdas, out } => {
            let q: QuadraticProblem = read_json(&config)?;
            q.validate()?;
            let traj = if explicit { q.evolve_explicit(steps) } else { q.evolve(steps) };
            let dir = out_dir(None, out, "runs/quadratic");
            fs::create_dir_all(&dir)?;
            traj.write_csv(BufWriter::new(File::create(dir.join("trajectory.csv"))?))?;
            let lambdas = if lambdas.is_empty() {
                q.eigenvalues().into_iter().filter(|&l| l > 0.0).collect()
            } else {
                lambdas
            };
            let rows = residual_table(&lambdas, q.lr);
            write_residual_csv(&rows, BufWriter::new(File::create(dir.join("residuals.csv"))?))?;
            for r in &rows {
                println!("λ={:<10} αλ={:<10.4e} residual {:.6e} expansion {:.6e}", r.lambda, r.lr * r.lambda, r.residual, r.series);
            }
            println!("trajectory and residual tables in {}", dir.display());
        }
        Command::Verify { checks, out } => {
            let ids: Vec<u8> = if checks.is_empty() { CHECKS.iter().map(|c| c.id).collect() } else { checks };
            let started = Instant::now();
            let results = verify(&ids)?;
            for (o, t) in &results {
                println!("{} ({:.1}s)", o.line(), t.as_secs_f64());
            }
            let outcomes: Vec<CheckOutcome> = results.into_iter().map(|(o, _)| o).collect();
            let ok = harness::all_passed(&outcomes);
            println!("{} in {:.1}s", if ok { "all gating checks passed" } else { "gating checks failed" }, started.elapsed().as_secs_f64());
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                write_json(&dir.join("verify.json"), &serde_json::json!({ "schema_version": 1, "checks": outcomes }))?;
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
