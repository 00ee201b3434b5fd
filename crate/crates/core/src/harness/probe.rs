use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::curvature::{
    full_matrix, gn_trace_sampled, hutchinson_trace, ntk_from_operator, ntk_gn_spectra, nme_scan, symmetric_eigenvalues,
    CurvatureKind, CurvatureOperator, CurvatureReport, ReportRow, ScanSpec, DEFAULT_DENSE_CAP,
};
use crate::error::{Error, Result};
use crate::nn::{LossKind, Problem};
use crate::tape::ParamVector;

pub const SPECTRA_CSV_SCHEMA: &str = "# nmekit spectra v1";
pub const NTK_CSV_SCHEMA: &str = "# nmekit ntk v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Traces,
    Spectra,
    Scan,
    Ntk,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 4] = [ProbeKind::Traces, ProbeKind::Spectra, ProbeKind::Scan, ProbeKind::Ntk];

    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Traces => "traces",
            ProbeKind::Spectra => "spectra",
            ProbeKind::Scan => "scan",
            ProbeKind::Ntk => "ntk",
        }
    }
}

impl std::str::FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProbeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown probe {s:?}")))
    }
}

fn default_samples() -> usize {
    1000
}

fn default_cap() -> usize {
    DEFAULT_DENSE_CAP
}

fn default_rel_tol() -> f64 {
    1e-10
}

fn default_threshold() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Largest parameter count for dense extraction.
    #[serde(default = "default_cap")]
    pub cap: usize,
    /// Relative cutoff for "nonzero" eigenvalues.
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default)]
    pub scan: Option<ScanSpec>,
    #[serde(default = "default_threshold")]
    pub census_threshold: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            n_samples: default_samples(),
            seed: 0,
            cap: default_cap(),
            rel_tol: default_rel_tol(),
            scan: None,
            census_threshold: default_threshold(),
        }
    }
}

/// Scan of the first two entries of the first weight row, `±1` around the
/// current values.
pub fn default_scan(params: &ParamVector) -> ScanSpec {
    let at = |i: usize| params.as_slice().get(i).copied().unwrap_or(0.0);
    ScanSpec {
        index_a: 0,
        index_b: 1,
        range_a: [at(0) - 1.0, at(0) + 1.0],
        range_b: [at(1) - 1.0, at(1) + 1.0],
        resolution: 21,
    }
}

/// Runs one probe and writes `<kind>.csv` and `<kind>.json` into `out`, plus
/// a kind-specific data file for spectra, scans and NTKs.
pub fn probe(
    kind: ProbeKind,
    problem: &Problem,
    params: &ParamVector,
    opts: &ProbeOptions,
    out: &Path,
) -> Result<CurvatureReport> {
    fs::create_dir_all(out)?;
    let mut report = CurvatureReport::new(kind.name(), &problem.spec, params);
    report.push(ReportRow::exact("loss", problem.loss(params)?));
    report.push(ReportRow::exact("num_params", params.len() as f64));
    report.push(ReportRow::exact("batch_size", problem.batch.len() as f64));
    match kind {
        ProbeKind::Traces => traces(problem, params, opts, &mut report)?,
        ProbeKind::Spectra => spectra(problem, params, opts, &mut report, out)?,
        ProbeKind::Scan => {
            let spec = opts.scan.clone().unwrap_or_else(|| default_scan(params));
            let grid = nme_scan(problem, params, &spec)?;
            report.push(ReportRow::exact("census_threshold", opts.census_threshold));
            report.push(ReportRow::exact("census", grid.census(opts.census_threshold)));
            report.push(ReportRow::exact("nme_norm_max", grid.nme_norm.iter().copied().fold(0.0, f64::max)));
            grid.write_csv(BufWriter::new(File::create(out.join("scan_grid.csv"))?))?;
        }
        ProbeKind::Ntk => ntk(problem, params, opts, &mut report, out)?,
    }
    report.write_csv(BufWriter::new(File::create(out.join(format!("{}.csv", kind.name())))?))?;
    fs::write(out.join(format!("{}.json", kind.name())), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

const KINDS: [(CurvatureKind, &str); 3] =
    [(CurvatureKind::Hessian, "hessian"), (CurvatureKind::GaussNewton, "gn"), (CurvatureKind::Nme, "nme")];

fn traces(problem: &Problem, params: &ParamVector, opts: &ProbeOptions, report: &mut CurvatureReport) -> Result<()> {
    let dense = params.len() <= opts.cap;
    for (kind, name) in KINDS {
        let op = CurvatureOperator::new(kind, problem, params)?;
        let est = hutchinson_trace(&op, opts.n_samples, opts.seed)?;
        report.push(ReportRow::estimate(
            format!("{name}_trace_hutchinson"),
            est.estimate,
            est.stderr,
            est.n_samples,
            est.seed,
        ));
        if dense {
            let m = full_matrix(&op, opts.cap)?;
            report.push(ReportRow::exact(format!("{name}_trace_dense"), m.trace()));
        }
    }
    if problem.loss == LossKind::CrossEntropy {
        let est = gn_trace_sampled(problem, params, opts.n_samples, opts.seed)?;
        report.push(ReportRow::estimate("gn_trace_sampled_label", est.estimate, est.stderr, est.n_samples, est.seed));
    }
    Ok(())
}

fn spectra(
    problem: &Problem,
    params: &ParamVector,
    opts: &ProbeOptions,
    report: &mut CurvatureReport,
    out: &Path,
) -> Result<()> {
    let mut f = BufWriter::new(File::create(out.join("spectra_eigenvalues.csv"))?);
    writeln!(f, "{SPECTRA_CSV_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["matrix", "index", "eigenvalue"])?;
    let mut norms = [0.0; 3];
    for (i, (kind, name)) in KINDS.into_iter().enumerate() {
        let m = full_matrix(&CurvatureOperator::new(kind, problem, params)?, opts.cap)?;
        let ev = symmetric_eigenvalues(&m);
        norms[i] = m.norm();
        let scale = ev.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let negative = ev.iter().filter(|&&v| v < -opts.rel_tol * scale).count();
        report.push(ReportRow::exact(format!("{name}_eig_min"), ev.first().copied().unwrap_or(0.0)));
        report.push(ReportRow::exact(format!("{name}_eig_max"), ev.last().copied().unwrap_or(0.0)));
        report.push(ReportRow::exact(format!("{name}_negative_count"), negative as f64));
        report.push(ReportRow::exact(format!("{name}_frobenius"), norms[i]));
        for (j, v) in ev.iter().enumerate() {
            w.write_record([name.to_string(), j.to_string(), format!("{v:e}")])?;
        }
    }
    w.flush()?;
    let ratio = if norms[1] > 0.0 { norms[2] / norms[1] } else { f64::INFINITY };
    report.push(ReportRow::exact("nme_gn_frobenius_ratio", ratio));
    Ok(())
}

fn ntk(
    problem: &Problem,
    params: &ParamVector,
    opts: &ProbeOptions,
    report: &mut CurvatureReport,
    out: &Path,
) -> Result<()> {
    if params.len() > opts.cap {
        return Err(Error::CapExceeded { params: params.len(), cap: opts.cap });
    }
    let op = CurvatureOperator::new(CurvatureKind::GaussNewton, problem, params)?;
    let k = ntk_from_operator(&op)?;
    let ev = symmetric_eigenvalues(&k.matrix);
    report.push(ReportRow::exact("ntk_size", k.matrix.nrows() as f64));
    report.push(ReportRow::exact("ntk_rank", k.rank(opts.rel_tol) as f64));
    report.push(ReportRow::exact("ntk_eig_min", ev.first().copied().unwrap_or(0.0)));
    report.push(ReportRow::exact("ntk_eig_max", ev.last().copied().unwrap_or(0.0)));
    let link = ntk_gn_spectra(problem, params, opts.rel_tol)?;
    report.push(ReportRow::exact("ntk_gn_spectrum_max_rel_error", link.max_rel_error()));
    report.push(ReportRow::exact("ntk_gn_spectrum_max_scaled_error", link.max_scaled_error()));
    write_matrix(&k.matrix, &out.join("ntk_matrix.csv"))
}

fn write_matrix(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{NTK_CSV_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["row", "col", "value"])?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_record([i.to_string(), j.to_string(), format!("{:e}", m[(i, j)])])?;
        }
    }
    w.flush()?;
    Ok(())
}
