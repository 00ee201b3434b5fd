use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ActivationSpec, Batch, ModelSpec};
use crate::rng::{normal_vec, stream};
use crate::tape::{ParamVector, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Samples stored column-wise (`inputs` is `d × N`, `targets` is `k × N`)
/// with one split tag per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub split: Vec<Split>,
    /// Set for one-hot classification targets.
    pub num_classes: Option<usize>,
    /// The generating network, for teacher-student data.
    pub teacher: Option<(ModelSpec, ParamVector)>,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Tensor, split: Vec<Split>, num_classes: Option<usize>) -> Result<Self> {
        let ds = Self { inputs, targets, split, num_classes, teacher: None };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        Batch::new(self.inputs.clone(), self.targets.clone())?;
        if self.split.len() != self.len() {
            return Err(Error::Shape(format!("{} split tags for {} samples", self.split.len(), self.len())));
        }
        if !self.inputs.is_finite() {
            return Err(Error::NonFinite("dataset inputs".into()));
        }
        if !self.targets.is_finite() {
            return Err(Error::NonFinite("dataset targets".into()));
        }
        if let Some(k) = self.num_classes {
            if self.targets.rows() != k {
                return Err(Error::Shape(format!("{} target rows for {k} classes", self.targets.rows())));
            }
            for j in 0..self.len() {
                let col = self.targets.column(j);
                let ones = col.data().iter().filter(|&&v| v == 1.0).count();
                let zeros = col.data().iter().filter(|&&v| v == 0.0).count();
                if ones != 1 || ones + zeros != k {
                    return Err(Error::Format(format!("target column {j} is not one-hot")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.rows()
    }

    pub fn target_dim(&self) -> usize {
        self.targets.rows()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// All samples with the given tag; `None` if there are none.
    pub fn batch(&self, split: Split) -> Result<Option<Batch>> {
        let idx = self.indices(split);
        if idx.is_empty() {
            return Ok(None);
        }
        Ok(Some(self.full_batch()?.select(&idx)?))
    }

    pub fn full_batch(&self) -> Result<Batch> {
        Batch::new(self.inputs.clone(), self.targets.clone())
    }
}

/// Fraction of columns whose argmax matches the one-hot target.
pub fn accuracy(outputs: &Tensor, targets: &Tensor) -> f64 {
    let n = outputs.cols();
    if n == 0 {
        return 0.0;
    }
    let hits = (0..n).filter(|&j| argmax(&outputs.column(j)) == argmax(&targets.column(j))).count();
    hits as f64 / n as f64
}

fn argmax(col: &Tensor) -> usize {
    col.data()
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Blobs,
    Spirals,
    TeacherMlp,
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_teacher_hidden() -> Vec<usize> {
    vec![8]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub seed: u64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Hidden widths of the teacher network.
    #[serde(default = "default_teacher_hidden")]
    pub teacher_hidden: Vec<usize>,
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, n: usize, d: usize, k: usize, seed: u64) -> Self {
        Self { kind, n, d, k, seed, test_fraction: default_test_fraction(), teacher_hidden: default_teacher_hidden() }
    }

    pub fn with_test_fraction(mut self, f: f64) -> Self {
        self.test_fraction = f;
        self
    }

    pub fn with_teacher_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.teacher_hidden = hidden;
        self
    }

    pub fn teacher_spec(&self) -> Result<ModelSpec> {
        let mut widths = vec![self.d];
        widths.extend(&self.teacher_hidden);
        widths.push(self.k);
        ModelSpec::new(widths, ActivationSpec::gelu())
    }
}

const BLOB_RADIUS: f64 = 4.0;
const SPIRAL_TURNS: f64 = 1.5;
const SPIRAL_NOISE: f64 = 0.05;

/// Deterministic synthetic data; sample `i` draws from its own RNG stream.
///
/// The last `round(test_fraction · n)` samples are tagged test.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let SyntheticSpec { kind, n, d, k, seed, test_fraction, .. } = *spec;
    if n == 0 || d == 0 || k == 0 {
        return Err(Error::InvalidArgument(format!("n, d, k must be positive, got {n}, {d}, {k}")));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(format!("test_fraction must be in [0, 1), got {test_fraction}")));
    }
    if kind == SyntheticKind::Spirals && d < 2 {
        return Err(Error::InvalidArgument("spirals need d >= 2".into()));
    }
    if kind != SyntheticKind::TeacherMlp && k < 2 {
        return Err(Error::InvalidArgument("classification data needs k >= 2".into()));
    }
    let mut inputs = Tensor::zeros(&[d, n]);
    let mut targets = Tensor::zeros(&[k, n]);
    let mut teacher = None;
    match kind {
        SyntheticKind::Blobs | SyntheticKind::Spirals => {
            for i in 0..n {
                let mut rng = stream(seed, i as u64);
                let class = rng.random_range(0..k);
                let x = if kind == SyntheticKind::Blobs {
                    blob_point(&mut rng, class, k, d)
                } else {
                    spiral_point(&mut rng, class, k, d)
                };
                for (r, v) in x.into_iter().enumerate() {
                    inputs.set(r, i, v);
                }
                targets.set(class, i, 1.0);
            }
        }
        SyntheticKind::TeacherMlp => {
            for i in 0..n {
                let x = normal_vec(&mut stream(seed, i as u64), d);
                for (r, v) in x.into_iter().enumerate() {
                    inputs.set(r, i, v);
                }
            }
            let tspec = spec.teacher_spec()?;
            let params = tspec.init(seed ^ TEACHER_SALT);
            targets = tspec.output(&params, &inputs)?;
            teacher = Some((tspec, params));
        }
    }
    let n_test = (test_fraction * n as f64).round() as usize;
    let split = (0..n).map(|i| if i + n_test >= n { Split::Test } else { Split::Train }).collect();
    let classes = (kind != SyntheticKind::TeacherMlp).then_some(k);
    let mut ds = Dataset::new(inputs, targets, split, classes)?;
    ds.teacher = teacher;
    Ok(ds)
}

const TEACHER_SALT: u64 = 0x7ea_c4e5;

fn blob_point(rng: &mut impl Rng, class: usize, k: usize, d: usize) -> Vec<f64> {
    let angle = 2.0 * PI * class as f64 / k as f64;
    let mut x = normal_vec(rng, d);
    x[0] += BLOB_RADIUS * angle.cos();
    if d > 1 {
        x[1] += BLOB_RADIUS * angle.sin();
    }
    x
}

fn spiral_point(rng: &mut impl Rng, class: usize, k: usize, d: usize) -> Vec<f64> {
    let t: f64 = rng.random_range(0.05..1.0);
    let angle = 2.0 * PI * (SPIRAL_TURNS * t + class as f64 / k as f64);
    let mut x: Vec<f64> = normal_vec(rng, d).into_iter().map(|v| SPIRAL_NOISE * v).collect();
    x[0] += t * angle.cos();
    x[1] += t * angle.sin();
    x
}
