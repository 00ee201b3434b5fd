use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Flat, ordered view of every trainable parameter.
///
/// Block order is fixed by the [`ParamLayout`] that produced it; for models
/// this is layer-major with each weight matrix row-major (bias after weight
/// when enabled).
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn basis(n: usize, i: usize) -> Self {
        let mut v = Self::zeros(n);
        v.0[i] = 1.0;
        v
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        Self(self.0.iter().map(|v| alpha * v).collect())
    }

    /// `self + alpha * other` as a new vector.
    pub fn plus(&self, alpha: f64, other: &ParamVector) -> ParamVector {
        let mut out = self.clone();
        out.axpy(alpha, other);
        out
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Shapes of the parameter blocks, in flattening order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    shapes: Vec<Vec<usize>>,
}

impl ParamLayout {
    pub fn new(shapes: Vec<Vec<usize>>) -> Self {
        Self { shapes }
    }

    /// A single rank-1 block of length `n`.
    pub fn flat(n: usize) -> Self {
        Self { shapes: vec![vec![n]] }
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn block_len(&self, i: usize) -> usize {
        self.shapes[i].iter().product()
    }

    pub fn num_params(&self) -> usize {
        (0..self.shapes.len()).map(|i| self.block_len(i)).sum()
    }

    /// Start offset of each block in the flat vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        (0..self.shapes.len())
            .map(|i| {
                let o = acc;
                acc += self.block_len(i);
                o
            })
            .collect()
    }

    /// Block index and offset within that block for a flat index.
    pub fn locate(&self, index: usize) -> Option<(usize, usize)> {
        let mut acc = 0;
        for i in 0..self.shapes.len() {
            let n = self.block_len(i);
            if index < acc + n {
                return Some((i, index - acc));
            }
            acc += n;
        }
        None
    }

    pub fn split(&self, params: &ParamVector) -> Result<Vec<Tensor>> {
        if params.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, layout needs {}",
                params.len(),
                self.num_params()
            )));
        }
        let mut out = Vec::with_capacity(self.shapes.len());
        let mut off = 0;
        for shape in &self.shapes {
            let n: usize = shape.iter().product();
            out.push(Tensor::new(shape.clone(), params.as_slice()[off..off + n].to_vec())?);
            off += n;
        }
        Ok(out)
    }

    pub fn join(&self, blocks: &[Tensor]) -> ParamVector {
        let mut v = Vec::with_capacity(self.num_params());
        for b in blocks {
            v.extend_from_slice(b.data());
        }
        ParamVector(v)
    }
}
