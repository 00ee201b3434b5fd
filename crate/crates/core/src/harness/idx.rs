//! IDX files (the MNIST container format), unsigned-byte payloads only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tape::Tensor;

use super::dataset::{Dataset, Split};

const UBYTE: u8 = 0x08;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<u32>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn new(dims: Vec<u32>, data: Vec<u8>) -> Result<Self> {
        let expected: usize = dims.iter().map(|&d| d as usize).product();
        if expected != data.len() {
            return Err(Error::Shape(format!("dims {dims:?} need {expected} bytes, got {}", data.len())));
        }
        if dims.is_empty() || dims.len() > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!("unsupported rank {}", dims.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Format(format!("IDX header needs 4 bytes, file has {}", bytes.len())));
        }
        if bytes[0] != 0 || bytes[1] != 0 {
            return Err(Error::Format(format!("bad IDX magic {:02x}{:02x}, expected 0000", bytes[0], bytes[1])));
        }
        if bytes[2] != UBYTE {
            return Err(Error::Format(format!("IDX element type 0x{:02x} unsupported, expected 0x08", bytes[2])));
        }
        let ndim = bytes[3] as usize;
        let header = 4 + 4 * ndim;
        if ndim == 0 {
            return Err(Error::Format("IDX rank 0".into()));
        }
        if bytes.len() < header {
            return Err(Error::Format(format!("IDX header expects {header} bytes, file has {}", bytes.len())));
        }
        let dims: Vec<u32> = bytes[4..header]
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let expected = header + dims.iter().map(|&d| d as usize).product::<usize>();
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "IDX dims {dims:?} imply {expected} bytes, file has {}",
                bytes.len()
            )));
        }
        Ok(Self { dims, data: bytes[header..].to_vec() })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0, 0, UBYTE, self.dims.len() as u8];
        for d in &self.dims {
            out.extend(d.to_be_bytes());
        }
        out.extend(&self.data);
        out
    }
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path)?;
    IdxArray::parse(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_idx(path: &Path, array: &IdxArray) -> Result<()> {
    Ok(fs::write(path, array.to_bytes())?)
}

/// Images scaled to `[0, 1]` and flattened, labels one-hot over `num_classes`.
pub fn load_idx(images: &Path, labels: &Path, num_classes: usize, split: Split) -> Result<Dataset> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    dataset_from_idx(&img, &lab, num_classes, split)
}

pub fn dataset_from_idx(img: &IdxArray, lab: &IdxArray, num_classes: usize, split: Split) -> Result<Dataset> {
    if img.dims.len() < 2 {
        return Err(Error::Format(format!("image file has rank {}, expected at least 2", img.dims.len())));
    }
    if lab.dims.len() != 1 {
        return Err(Error::Format(format!("label file has rank {}, expected 1", lab.dims.len())));
    }
    let n = img.dims[0] as usize;
    if lab.dims[0] as usize != n {
        return Err(Error::Shape(format!("{n} images but {} labels", lab.dims[0])));
    }
    let d: usize = img.dims[1..].iter().map(|&x| x as usize).product();
    let mut inputs = Tensor::zeros(&[d, n]);
    let mut targets = Tensor::zeros(&[num_classes, n]);
    for j in 0..n {
        for i in 0..d {
            inputs.set(i, j, img.data[j * d + i] as f64 / 255.0);
        }
        let c = lab.data[j] as usize;
        if c >= num_classes {
            return Err(Error::Format(format!("label {c} at sample {j} exceeds {num_classes} classes")));
        }
        targets.set(c, j, 1.0);
    }
    Dataset::new(inputs, targets, vec![split; n], Some(num_classes))
}

/// Concatenates two datasets with matching dimensions.
pub fn concat(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    if a.input_dim() != b.input_dim() || a.target_dim() != b.target_dim() || a.num_classes != b.num_classes {
        return Err(Error::Shape("datasets have different dimensions".into()));
    }
    let join = |x: &Tensor, y: &Tensor| -> Result<Tensor> {
        let r = x.rows();
        let mut out = Tensor::zeros(&[r, x.cols() + y.cols()]);
        for (off, t) in [(0, x), (x.cols(), y)] {
            for j in 0..t.cols() {
                for i in 0..r {
                    out.set(i, off + j, t.get(i, j));
                }
            }
        }
        Ok(out)
    };
    let split = a.split.iter().chain(&b.split).copied().collect();
    Dataset::new(join(&a.inputs, &b.inputs)?, join(&a.targets, &b.targets)?, split, a.num_classes)
}
