//! The grid-graph network: stacked GraphSAGE layers with grid max-pooling
//! and channel/spatial attention, followed by an MLP head.

mod file;
pub(crate) mod forward;
mod layers;

pub use file::{decode_model, encode_model, FORMAT_VERSION, MAGIC};
pub use forward::{forward, softmax_probs, trace_with_gradients, LayerRecord, LayerTrace};
pub use layers::{
    channel_attention, grid_max_pool, sage_aggregate, sage_update, spatial_attention, AttentionGates,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_builder::coarse_len;
use crate::tensor::{Tape, Tensor, Var};

/// How the neighbour and self branches of a SAGE update are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    /// `ReLU((z W_nb + b_nb) ⊙ (h W_self + b_self))`
    Product,
    /// `ReLU((z W_nb + b_nb) + (h W_self + b_self))`
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub channels: usize,
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_height: usize,
    pub input_width: usize,
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
    /// Channel-attention reduction ratio `r`.
    pub reduction: usize,
    pub update_rule: UpdateRule,
    pub attention: bool,
    pub head_hidden: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Architecture {
    /// Three layers (16, 32, 64 channels, pool 2), `r = 4`, product update,
    /// attention on, one hidden head layer of 128.
    pub fn default_for(input_height: usize, input_width: usize, class_names: Vec<String>) -> Self {
        Architecture {
            input_height,
            input_width,
            in_channels: 1,
            layers: [16, 32, 64]
                .into_iter()
                .map(|channels| LayerSpec { channels, pool: 2 })
                .collect(),
            reduction: 4,
            update_rule: UpdateRule::Product,
            attention: true,
            head_hidden: vec![128],
            class_names,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Grid dims at every level: input first, then after each pooling.
    pub fn grid_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![(self.input_height, self.input_width)];
        for layer in &self.layers {
            let (h, w) = *dims.last().unwrap();
            dims.push((coarse_len(h, layer.pool.max(1)), coarse_len(w, layer.pool.max(1))));
        }
        dims
    }

    /// Channel count at every level, input first.
    pub fn channel_dims(&self) -> Vec<usize> {
        std::iter::once(self.in_channels)
            .chain(self.layers.iter().map(|l| l.channels))
            .collect()
    }

    pub fn head_input_dim(&self) -> usize {
        let (h, w) = *self.grid_dims().last().unwrap();
        h * w * self.channel_dims().last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.input_height == 0 || self.input_width == 0 || self.in_channels == 0 {
            return bad("input dims and channels must be positive".into());
        }
        if self.num_classes() < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes()));
        }
        let mut names = self.class_names.clone();
        names.sort();
        names.dedup();
        if names.len() != self.class_names.len() {
            return bad("class names must be unique".into());
        }
        if self.reduction == 0 {
            return bad("reduction ratio must be >= 1".into());
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.channels == 0 || layer.pool == 0 {
                return bad(format!("layer {i}: channels and pool size must be positive"));
            }
            if self.attention && layer.channels % self.reduction != 0 {
                return bad(format!(
                    "layer {i}: reduction ratio {} does not divide {} channels",
                    self.reduction, layer.channels
                ));
            }
        }
        if self.head_hidden.contains(&0) {
            return bad("head hidden widths must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SageLayerParams {
    pub w_neighbour: Tensor,
    pub b_neighbour: Tensor,
    pub w_self: Tensor,
    pub b_self: Tensor,
}

/// Channel MLP `d -> d/r -> d` shared by the average and max branches, plus
/// the `2 -> 1` spatial combiner.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub reduction: usize,
    pub channel_w1: Tensor,
    pub channel_b1: Tensor,
    pub channel_w2: Tensor,
    pub channel_b2: Tensor,
    pub spatial_w: Tensor,
    pub spatial_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub sage: SageLayerParams,
    pub attention: Option<AttentionParams>,
    pub pool: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug)]
pub struct ParamRef<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: &'a Tensor,
}

/// Every learnable tensor of the network plus its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub layers: Vec<LayerParams>,
    pub head: Vec<Dense>,
}

/// Shapes in declaration order: `(name, kind, shape)`.
fn param_layout(arch: &Architecture) -> Vec<(String, ParamKind, Vec<usize>)> {
    use ParamKind::{Bias, Weight};
    let mut out = Vec::new();
    let chans = arch.channel_dims();
    for (l, pair) in chans.windows(2).enumerate() {
        let (d_in, d_out) = (pair[0], pair[1]);
        out.push((format!("layer{l}.w_neighbour"), Weight, vec![d_in, d_out]));
        out.push((format!("layer{l}.b_neighbour"), Bias, vec![d_out]));
        out.push((format!("layer{l}.w_self"), Weight, vec![d_in, d_out]));
        out.push((format!("layer{l}.b_self"), Bias, vec![d_out]));
        if arch.attention {
            let hidden = d_out / arch.reduction;
            out.push((format!("layer{l}.channel_w1"), Weight, vec![d_out, hidden]));
            out.push((format!("layer{l}.channel_b1"), Bias, vec![hidden]));
            out.push((format!("layer{l}.channel_w2"), Weight, vec![hidden, d_out]));
            out.push((format!("layer{l}.channel_b2"), Bias, vec![d_out]));
            out.push((format!("layer{l}.spatial_w"), Weight, vec![2, 1]));
            out.push((format!("layer{l}.spatial_b"), Bias, vec![1]));
        }
    }
    let mut width = arch.head_input_dim();
    for (i, &next) in arch
        .head_hidden
        .iter()
        .chain(std::iter::once(&arch.num_classes()))
        .enumerate()
    {
        out.push((format!("head{i}.w"), Weight, vec![width, next]));
        out.push((format!("head{i}.b"), Bias, vec![next]));
        width = next;
    }
    out
}

impl ModelParams {
    /// Builds a model from tensors given in declaration order.
    pub fn from_tensors(arch: Architecture, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let layout = param_layout(&arch);
        if layout.len() != tensors.len() {
            return Err(Error::InvalidInput(format!(
                "architecture has {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, _, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let mut layers = Vec::with_capacity(arch.layers.len());
        for spec in &arch.layers {
            let sage = SageLayerParams {
                w_neighbour: next(),
                b_neighbour: next(),
                w_self: next(),
                b_self: next(),
            };
            let attention = arch.attention.then(|| AttentionParams {
                reduction: arch.reduction,
                channel_w1: next(),
                channel_b1: next(),
                channel_w2: next(),
                channel_b2: next(),
                spatial_w: next(),
                spatial_b: next(),
            });
            layers.push(LayerParams {
                sage,
                attention,
                pool: spec.pool,
            });
        }
        let head = (0..=arch.head_hidden.len())
            .map(|_| Dense { w: next(), b: next() })
            .collect();
        Ok(ModelParams { arch, layers, head })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let tensors = param_layout(&arch)
            .into_iter()
            .map(|(_, _, shape)| Tensor::zeros(&shape))
            .collect();
        Self::from_tensors(arch, tensors)
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(crate::training::STREAM_INIT);
        let tensors = param_layout(&arch)
            .into_iter()
            .map(|(_, kind, shape)| match kind {
                ParamKind::Bias => Tensor::zeros(&shape),
                ParamKind::Weight => {
                    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let n = shape[0] * shape[1];
                    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
                    Tensor::new(shape, data).expect("layout shape")
                }
            })
            .collect();
        Self::from_tensors(arch, tensors)
    }

    pub fn class_names(&self) -> &[String] {
        &self.arch.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    /// All tensors in declaration order.
    pub fn tensors(&self) -> Vec<ParamRef<'_>> {
        let refs = self.tensor_refs();
        param_layout(&self.arch)
            .into_iter()
            .zip(refs)
            .map(|((name, kind, _), tensor)| ParamRef { name, kind, tensor })
            .collect()
    }

    fn tensor_refs(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            let s = &layer.sage;
            out.extend([&s.w_neighbour, &s.b_neighbour, &s.w_self, &s.b_self]);
            if let Some(a) = &layer.attention {
                out.extend([
                    &a.channel_w1,
                    &a.channel_b1,
                    &a.channel_w2,
                    &a.channel_b2,
                    &a.spatial_w,
                    &a.spatial_b,
                ]);
            }
        }
        for d in &self.head {
            out.extend([&d.w, &d.b]);
        }
        out
    }

    /// Mutable tensors in declaration order, tagged weight or bias.
    pub fn tensors_mut(&mut self) -> Vec<(ParamKind, &mut Tensor)> {
        let kinds: Vec<ParamKind> = param_layout(&self.arch).into_iter().map(|(_, k, _)| k).collect();
        let mut out = Vec::new();
        for layer in &mut self.layers {
            let s = &mut layer.sage;
            out.extend([&mut s.w_neighbour, &mut s.b_neighbour, &mut s.w_self, &mut s.b_self]);
            if let Some(a) = &mut layer.attention {
                out.extend([
                    &mut a.channel_w1,
                    &mut a.channel_b1,
                    &mut a.channel_w2,
                    &mut a.channel_b2,
                    &mut a.spatial_w,
                    &mut a.spatial_b,
                ]);
            }
        }
        for d in &mut self.head {
            out.extend([&mut d.w, &mut d.b]);
        }
        kinds.into_iter().zip(out).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensor_refs().iter().map(|t| t.len()).sum()
    }

    /// Records every tensor on `tape` in declaration order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensor_refs()
            .into_iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(trainable)))
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles for a model's tensors, in declaration order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

pub(crate) struct SageVars {
    pub w_neighbour: Var,
    pub b_neighbour: Var,
    pub w_self: Var,
    pub b_self: Var,
}

pub(crate) struct AttentionVars {
    pub channel_w1: Var,
    pub channel_b1: Var,
    pub channel_w2: Var,
    pub channel_b2: Var,
    pub spatial_w: Var,
    pub spatial_b: Var,
}

pub(crate) struct LayerVars {
    pub sage: SageVars,
    pub attention: Option<AttentionVars>,
}

impl BoundParams {
    pub(crate) fn structured(&self, arch: &Architecture) -> (Vec<LayerVars>, Vec<(Var, Var)>) {
        let mut it = self.vars.iter().copied();
        let mut next = || it.next().expect("bound params follow the layout");
        let layers = arch
            .layers
            .iter()
            .map(|_| LayerVars {
                sage: SageVars {
                    w_neighbour: next(),
                    b_neighbour: next(),
                    w_self: next(),
                    b_self: next(),
                },
                attention: arch.attention.then(|| AttentionVars {
                    channel_w1: next(),
                    channel_b1: next(),
                    channel_w2: next(),
                    channel_b2: next(),
                    spatial_w: next(),
                    spatial_b: next(),
                }),
            })
            .collect();
        let head = (0..=arch.head_hidden.len()).map(|_| (next(), next())).collect();
        (layers, head)
    }
}
