use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{add_bias_value, matmul, NodeId, OverrideRegistry, ParamLayout, ParamVector, Tape, Tensor};

use super::activation::ActivationSpec;

/// Architecture of a fully connected stack `h_l = W_l x_l (+ b_l)`,
/// `x_{l+1} = φ(h_l)`.
///
/// The last layer is linear unless `output_activation` is set. Parameters are
/// flattened layer by layer, each `W_l` (shape `widths[l+1] × widths[l]`)
/// row-major, followed by `b_l` when biases are enabled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub widths: Vec<usize>,
    pub activation: ActivationSpec,
    #[serde(default)]
    pub bias: bool,
    #[serde(default)]
    pub output_activation: bool,
}

/// Where a flat parameter index lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSlot {
    Weight { layer: usize, row: usize, col: usize },
    Bias { layer: usize, row: usize },
}

impl ParamSlot {
    pub fn layer(&self) -> usize {
        match *self {
            ParamSlot::Weight { layer, .. } | ParamSlot::Bias { layer, .. } => layer,
        }
    }
}

impl ModelSpec {
    pub fn new(widths: Vec<usize>, activation: ActivationSpec) -> Result<Self> {
        let spec = Self { widths, activation, bias: false, output_activation: false };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_output_activation(mut self, on: bool) -> Self {
        self.output_activation = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::InvalidArgument("a model needs at least input and output widths".into()));
        }
        if let Some(i) = self.widths.iter().position(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!("width {i} is zero")));
        }
        ActivationSpec::new(self.activation.kind, self.activation.beta)?;
        Ok(())
    }

    /// Number of weight matrices.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layout(&self) -> ParamLayout {
        let mut shapes = Vec::new();
        for l in 0..self.depth() {
            shapes.push(vec![self.widths[l + 1], self.widths[l]]);
            if self.bias {
                shapes.push(vec![self.widths[l + 1]]);
            }
        }
        ParamLayout::new(shapes)
    }

    pub fn num_params(&self) -> usize {
        self.layout().num_params()
    }

    fn blocks_per_layer(&self) -> usize {
        if self.bias {
            2
        } else {
            1
        }
    }

    /// Flat offset and length of `W_l`.
    pub fn weight_range(&self, layer: usize) -> std::ops::Range<usize> {
        let layout = self.layout();
        let b = layer * self.blocks_per_layer();
        let off = layout.offsets()[b];
        off..off + layout.block_len(b)
    }

    pub fn locate(&self, index: usize) -> Option<ParamSlot> {
        let (block, off) = self.layout().locate(index)?;
        let layer = block / self.blocks_per_layer();
        if self.bias && block % 2 == 1 {
            Some(ParamSlot::Bias { layer, row: off })
        } else {
            let cols = self.widths[layer];
            Some(ParamSlot::Weight { layer, row: off / cols, col: off % cols })
        }
    }

    /// Whether layer `l` applies the activation to its preactivation.
    pub fn activates(&self, layer: usize) -> bool {
        layer + 1 < self.depth() || self.output_activation
    }

    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn init(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Vec::with_capacity(self.num_params());
        for l in 0..self.depth() {
            let scale = 1.0 / (self.widths[l] as f64).sqrt();
            for _ in 0..self.widths[l] * self.widths[l + 1] {
                let g: f64 = StandardNormal.sample(&mut rng);
                v.push(scale * g);
            }
            if self.bias {
                v.extend(std::iter::repeat_n(0.0, self.widths[l + 1]));
            }
        }
        ParamVector::new(v)
    }

    pub fn registry(&self) -> Arc<OverrideRegistry> {
        self.activation.registry()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.rank() == 0 || input.rows() != self.input_width() {
            return Err(Error::Shape(format!(
                "layer 0 expects input width {}, got shape {:?}",
                self.input_width(),
                input.shape()
            )));
        }
        Ok(())
    }

    /// Eager forward pass over the columns of `input`, keeping every `h_l`
    /// and `x_l`.
    pub fn forward(&self, params: &ParamVector, input: &Tensor) -> Result<ForwardCache> {
        self.check_input(input)?;
        let blocks = self.layout().split(params)?;
        let prim = self.activation.primitive();
        let mut pre = Vec::with_capacity(self.depth());
        let mut post = vec![input.clone()];
        for l in 0..self.depth() {
            let per = self.blocks_per_layer();
            let mut h = matmul(&blocks[l * per], &post[l]);
            if self.bias {
                h = add_bias_value(&h, &blocks[l * per + 1]);
            }
            let x = if self.activates(l) { h.map(|v| prim.value(v)) } else { h.clone() };
            if !x.is_finite() {
                return Err(Error::NonFinite(format!("layer {l} forward")));
            }
            pre.push(h);
            post.push(x);
        }
        Ok(ForwardCache { pre, post })
    }

    pub fn output(&self, params: &ParamVector, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward(params, input)?.post.pop().unwrap())
    }

    /// Records the layer stack on `tape` using parameter nodes laid out as
    /// [`ModelSpec::layout`].
    pub fn record(&self, tape: &mut Tape, params: &[NodeId], input: &Tensor) -> Result<RecordedForward> {
        self.check_input(input)?;
        let per = self.blocks_per_layer();
        if params.len() != self.depth() * per {
            return Err(Error::Shape(format!(
                "model needs {} parameter blocks, got {}",
                self.depth() * per,
                params.len()
            )));
        }
        let prim = self.activation.primitive();
        let x0 = tape.constant(input.clone());
        let mut pre = Vec::with_capacity(self.depth());
        let mut post = vec![x0];
        for l in 0..self.depth() {
            let mut h = tape
                .matmul(params[l * per], post[l])
                .map_err(|e| Error::Shape(format!("layer {l}: {e}")))?;
            if self.bias {
                h = tape.add_bias(h, params[l * per + 1])?;
            }
            let x = if self.activates(l) { tape.activation(h, prim)? } else { h };
            pre.push(h);
            post.push(x);
        }
        Ok(RecordedForward { pre, post })
    }
}

/// Intermediates of an eager forward pass; `post[0]` is the input and
/// `post[depth]` the output `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCache {
    pub pre: Vec<Tensor>,
    pub post: Vec<Tensor>,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        self.post.last().unwrap()
    }
}

/// Tape nodes of a recorded forward pass, indexed like [`ForwardCache`].
#[derive(Clone, Debug)]
pub struct RecordedForward {
    pub pre: Vec<NodeId>,
    pub post: Vec<NodeId>,
}

impl RecordedForward {
    pub fn output(&self) -> NodeId {
        *self.post.last().unwrap()
    }
}

/// A model architecture together with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamVector,
}

impl Model {
    pub fn new(spec: ModelSpec, params: ParamVector) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.num_params() {
            return Err(Error::Shape(format!(
                "model needs {} parameters, got {}",
                spec.num_params(),
                params.len()
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let params = spec.init(seed);
        Self::new(spec, params)
    }
}

/// Records the model on a fresh tape, returning the output value, the tape,
/// and the output node.
pub fn record_forward(model: &Model, input: &Tensor) -> Result<(Tensor, Tape, NodeId)> {
    let mut tape = Tape::new(model.spec.registry());
    let nodes = tape.params_from(&model.spec.layout(), &model.params)?;
    let rec = model.spec.record(&mut tape, &nodes, input)?;
    let out = rec.output();
    Ok((tape.value(out).clone(), tape, out))
}

pub fn model_forward(model: &Model, input: &Tensor) -> Result<ForwardCache> {
    model.spec.forward(&model.params, input)
}

/// Inputs `d × N` and targets `k × N`, one sample per column.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl Batch {
    pub fn new(inputs: Tensor, targets: Tensor) -> Result<Self> {
        if inputs.rank() != 2 || targets.rank() != 2 || inputs.cols() != targets.cols() {
            return Err(Error::Shape(format!(
                "inputs {:?} and targets {:?} must be matrices with equal column counts",
                inputs.shape(),
                targets.shape()
            )));
        }
        if inputs.cols() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Ok(Self { inputs, targets })
    }

    /// Builds a batch from per-sample rows.
    pub fn from_samples(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<Self> {
        let to_cols = |rows: &[Vec<f64>], what: &str| -> Result<Tensor> {
            let n = rows.len();
            let d = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != d) {
                return Err(Error::Shape(format!("ragged {what} rows")));
            }
            let mut t = Tensor::zeros(&[d, n]);
            for (j, r) in rows.iter().enumerate() {
                for (i, v) in r.iter().enumerate() {
                    t.set(i, j, *v);
                }
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(what.into()));
            }
            Ok(t)
        };
        Self::new(to_cols(xs, "input")?, to_cols(ys, "target")?)
    }

    pub fn len(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Result<Batch> {
        let pick = |t: &Tensor| -> Result<Tensor> {
            let r = t.rows();
            let mut out = Tensor::zeros(&[r, indices.len()]);
            for (j, &src) in indices.iter().enumerate() {
                if src >= t.cols() {
                    return Err(Error::InvalidArgument(format!("sample {src} out of range")));
                }
                for i in 0..r {
                    out.set(i, j, t.get(i, src));
                }
            }
            Ok(out)
        };
        Batch::new(pick(&self.inputs)?, pick(&self.targets)?)
    }
}
