//! Closed-form dynamics of plain and penalized gradient descent on
//! `L(θ) = ½ θᵀ H θ`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use twofloat::TwoFloat;

use crate::error::{Error, Result};
use crate::regularize::TapeObjective;

pub const TRAJECTORY_CSV_SCHEMA: &str = "# nmekit quadratic-trajectory v1";
pub const RESIDUAL_CSV_SCHEMA: &str = "# nmekit step-doubling-residual v1";

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curvature {
    /// Diagonal `H`, given by its eigenvalues.
    Eigenvalues(Vec<f64>),
    /// Dense symmetric PSD `H`, one inner vector per row.
    Matrix(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticProblem {
    pub curvature: Curvature,
    pub theta0: Vec<f64>,
    pub lr: f64,
    #[serde(default)]
    pub rho: f64,
}

/// Per-step contraction of one mode: `1 − α(λ + ρλ²)`.
pub fn mode_factor(lambda: f64, lr: f64, rho: f64) -> f64 {
    1.0 - lr * (lambda + rho * lambda * lambda)
}

impl QuadraticProblem {
    pub fn diagonal(eigenvalues: Vec<f64>, theta0: Vec<f64>, lr: f64, rho: f64) -> Result<Self> {
        let p = Self { curvature: Curvature::Eigenvalues(eigenvalues), theta0, lr, rho };
        p.validate()?;
        Ok(p)
    }

    pub fn dense(h: &DMatrix<f64>, theta0: Vec<f64>, lr: f64, rho: f64) -> Result<Self> {
        let rows = h.row_iter().map(|r| r.iter().copied().collect()).collect();
        let p = Self { curvature: Curvature::Matrix(rows), theta0, lr, rho };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.theta0.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr", self.lr), ("rho", self.rho)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be non-negative and finite, got {v}")));
            }
        }
        if let Some(bad) = self.theta0.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("theta0[{bad}]")));
        }
        let n = self.dim();
        match &self.curvature {
            Curvature::Eigenvalues(ev) => {
                if ev.len() != n {
                    return Err(Error::Shape(format!("{} eigenvalues for {} parameters", ev.len(), n)));
                }
                if let Some((i, l)) = ev.iter().enumerate().find(|(_, l)| !(**l >= 0.0 && l.is_finite())) {
                    return Err(Error::InvalidArgument(format!("eigenvalue {i} is {l}; must be non-negative")));
                }
            }
            Curvature::Matrix(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Shape(format!("curvature matrix must be {n} x {n}")));
                }
                let h = self.hessian();
                if h.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("curvature matrix".into()));
                }
                let asym = (&h - h.transpose()).abs().max();
                if asym > SYMMETRY_TOL {
                    return Err(Error::InvalidArgument(format!("curvature matrix asymmetric by {asym:e}")));
                }
                let scale = h.abs().max().max(1.0);
                let min = h.symmetric_eigenvalues().min();
                if n > 0 && min < -SYMMETRY_TOL * scale {
                    return Err(Error::InvalidArgument(format!("curvature matrix not PSD, min eigenvalue {min:e}")));
                }
            }
        }
        Ok(())
    }

    pub fn hessian(&self) -> DMatrix<f64> {
        let n = self.dim();
        match &self.curvature {
            Curvature::Eigenvalues(ev) => DMatrix::from_diagonal(&DVector::from_column_slice(ev)),
            Curvature::Matrix(rows) => DMatrix::from_fn(n, n, |i, j| rows[i][j]),
        }
    }

    /// Eigenvalues of `H`, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = match &self.curvature {
            Curvature::Eigenvalues(ev) => ev.clone(),
            Curvature::Matrix(_) => self.hessian().symmetric_eigenvalues().iter().copied().collect(),
        };
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// The loss as a tape objective, for driving the step rules.
    pub fn objective(&self) -> TapeObjective {
        let n = self.dim();
        let h = self.hessian();
        TapeObjective::quadratic(h.transpose().as_slice().to_vec(), n)
    }

    /// θ at steps `0..=steps`, evolved mode by mode in the eigenbasis of `H`.
    pub fn evolve(&self, steps: usize) -> Trajectory {
        match &self.curvature {
            Curvature::Eigenvalues(ev) => self.evolve_modes(ev, &self.theta0, steps, None),
            Curvature::Matrix(_) => {
                let eig = self.hessian().symmetric_eigen();
                let q = eig.eigenvectors;
                let coords = q.tr_mul(&DVector::from_column_slice(&self.theta0));
                let ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
                self.evolve_modes(&ev, coords.as_slice(), steps, Some(&q))
            }
        }
    }

    fn evolve_modes(&self, ev: &[f64], start: &[f64], steps: usize, basis: Option<&DMatrix<f64>>) -> Trajectory {
        let factors: Vec<f64> = ev.iter().map(|&l| mode_factor(l, self.lr, self.rho)).collect();
        let mut cur = start.to_vec();
        let mut thetas = Vec::with_capacity(steps + 1);
        for t in 0..=steps {
            if t > 0 {
                cur.iter_mut().zip(&factors).for_each(|(c, f)| *c *= f);
            }
            match basis {
                None => thetas.push(cur.clone()),
                Some(q) => thetas.push((q * DVector::from_column_slice(&cur)).as_slice().to_vec()),
            }
        }
        Trajectory { thetas }
    }

    /// Same trajectory by repeated multiplication with `I − α(H + ρH²)`.
    pub fn evolve_explicit(&self, steps: usize) -> Trajectory {
        let h = self.hessian();
        let n = self.dim();
        let m = DMatrix::identity(n, n) - (&h + &h * &h * self.rho) * self.lr;
        let mut cur = DVector::from_column_slice(&self.theta0);
        let mut thetas = vec![self.theta0.clone()];
        for _ in 0..steps {
            cur = &m * cur;
            thetas.push(cur.as_slice().to_vec());
        }
        Trajectory { thetas }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `thetas[t]` is θ after `t` steps.
    pub thetas: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.thetas.len().saturating_sub(1)
    }

    pub fn max_abs_diff(&self, other: &Trajectory) -> f64 {
        self.thetas
            .iter()
            .zip(&other.thetas)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// Long format: one `(step, mode, value)` row per coordinate.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{TRAJECTORY_CSV_SCHEMA}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "mode", "value"])?;
        for (t, theta) in self.thetas.iter().enumerate() {
            for (i, v) in theta.iter().enumerate() {
                w.write_record([t.to_string(), i.to_string(), format!("{v:e}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `(1 − α(λ + ½αλ²))² − (1 − 2αλ)`: two penalized steps at `ρ = α/2`
/// against one plain step at `2α`.
///
/// Evaluated in double-double so the cancellation near `αλ → 0` keeps full
/// relative precision.
pub fn step_doubling_residual(lambda: f64, lr: f64) -> f64 {
    let l = TwoFloat::from(lambda);
    let a = TwoFloat::from(lr);
    let one = TwoFloat::from(1.0);
    let al = a * l;
    let f = one - a * (l + al * l * 0.5);
    let plain = one - al * 2.0;
    f64::from(f * f - plain)
}

/// `α³λ³ + ¼α⁴λ⁴`, the expanded form of [`step_doubling_residual`].
pub fn step_doubling_series(lambda: f64, lr: f64) -> f64 {
    let al = TwoFloat::from(lr) * TwoFloat::from(lambda);
    let cube = al * al * al;
    f64::from(cube + cube * al * 0.25)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub lambda: f64,
    pub lr: f64,
    pub residual: f64,
    pub series: f64,
    pub rel_diff: f64,
}

pub fn residual_table(lambdas: &[f64], lr: f64) -> Vec<ResidualRow> {
    lambdas
        .iter()
        .map(|&lambda| {
            let residual = step_doubling_residual(lambda, lr);
            let series = step_doubling_series(lambda, lr);
            let rel_diff = if series == 0.0 { residual.abs() } else { ((residual - series) / series).abs() };
            ResidualRow { lambda, lr, residual, series, rel_diff }
        })
        .collect()
}

pub fn write_residual_csv<W: Write>(rows: &[ResidualRow], mut out: W) -> Result<()> {
    writeln!(out, "{RESIDUAL_CSV_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda", "lr", "alpha_lambda", "residual", "series", "rel_diff"])?;
    for r in rows {
        w.write_record([r.lambda, r.lr, r.lr * r.lambda, r.residual, r.series, r.rel_diff].map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
