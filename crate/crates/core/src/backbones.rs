//! Feature extractors exposing every hidden representation.
//!
//! A backbone turns a batch of inputs into [`LayerStates`]: the ordered
//! list `h_1..h_L`, each `[batch × d_i]`, that any output head consumes.
//! `states[L-1]` is what a conventional last-layer classifier would see.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::Inputs;
use crate::error::{Error, Result};
use crate::nn::{Dense, DenseBlock, Norm};
use crate::params::{glorot_uniform, uniform, Bound, ParamId, ParamStore};
use crate::rng::SeededRng;

pub const PAD_ID: u32 = 0;

/// Per-layer hidden states recorded on a graph.
#[derive(Debug, Clone)]
pub struct LayerStates {
    pub states: Vec<Var>,
    pub dims: Vec<usize>,
}

impl LayerStates {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> Option<Var> {
        self.states.last().copied()
    }

    /// Checks the structural invariants against the graph.
    pub fn validate(&self, g: &Graph) -> Result<()> {
        if self.states.is_empty() || self.states.len() != self.dims.len() {
            return Err(Error::Dimension(format!(
                "{} states for {} declared dims",
                self.states.len(),
                self.dims.len()
            )));
        }
        let batch = g.shape(self.states[0])[0];
        for (i, (&s, &d)) in self.states.iter().zip(&self.dims).enumerate() {
            let sh = g.shape(s);
            if sh.len() != 2 || sh[1] != d || sh[0] != batch {
                return Err(Error::Dimension(format!(
                    "state {i} has shape {sh:?}, expected [{batch}, {d}]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneConfig {
    Mlp {
        #[serde(default = "default_mlp_input")]
        input_dim: usize,
        #[serde(default = "default_mlp_widths")]
        widths: Vec<usize>,
    },
    Cnn {
        #[serde(default = "default_cnn_hw")]
        height: usize,
        #[serde(default = "default_cnn_hw")]
        width: usize,
        #[serde(default = "default_cnn_in")]
        in_channels: usize,
        #[serde(default = "default_cnn_channels")]
        channels: Vec<usize>,
        #[serde(default = "default_cnn_kernel")]
        kernel: usize,
    },
    Text {
        #[serde(default = "default_vocab")]
        vocab_size: usize,
        #[serde(default = "default_embed")]
        embed_dim: usize,
        #[serde(default = "default_text_widths")]
        widths: Vec<usize>,
        #[serde(default = "default_seq_len")]
        seq_len: usize,
    },
    /// Features come pre-extracted from a fixed backbone; nothing to train.
    Frozen { dims: Vec<usize> },
}

fn default_mlp_input() -> usize {
    784
}
fn default_mlp_widths() -> Vec<usize> {
    vec![512, 256, 128]
}
fn default_cnn_hw() -> usize {
    32
}
fn default_cnn_in() -> usize {
    3
}
fn default_cnn_channels() -> Vec<usize> {
    vec![32, 64, 128]
}
fn default_cnn_kernel() -> usize {
    3
}
fn default_vocab() -> usize {
    20_000
}
fn default_embed() -> usize {
    128
}
fn default_text_widths() -> Vec<usize> {
    vec![128, 128]
}
fn default_seq_len() -> usize {
    256
}

impl BackboneConfig {
    pub fn mlp() -> Self {
        BackboneConfig::Mlp {
            input_dim: default_mlp_input(),
            widths: default_mlp_widths(),
        }
    }

    pub fn cnn() -> Self {
        BackboneConfig::Cnn {
            height: 32,
            width: 32,
            in_channels: 3,
            channels: default_cnn_channels(),
            kernel: 3,
        }
    }

    pub fn text(vocab_size: usize) -> Self {
        BackboneConfig::Text {
            vocab_size,
            embed_dim: default_embed(),
            widths: default_text_widths(),
            seq_len: default_seq_len(),
        }
    }

    /// Dims `[d_1..d_L]` of the states this backbone emits.
    pub fn dims(&self) -> Vec<usize> {
        match self {
            BackboneConfig::Mlp { widths, .. } => widths.clone(),
            BackboneConfig::Cnn { channels, .. } => channels.clone(),
            BackboneConfig::Text { widths, .. } => widths.clone(),
            BackboneConfig::Frozen { dims } => dims.clone(),
        }
    }

    /// Spatial size `(H, W)` each CNN stage convolves at; empty otherwise.
    pub fn stage_resolutions(&self) -> Vec<(usize, usize)> {
        match self {
            BackboneConfig::Cnn {
                height,
                width,
                channels,
                ..
            } => (0..channels.len())
                .map(|i| (height >> i, width >> i))
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("backbone.{field}"), msg));
        let dims = self.dims();
        if dims.is_empty() {
            return bad("widths", "at least one layer is required");
        }
        if dims.iter().any(|&d| d == 0) {
            return bad("widths", "layer widths must be positive");
        }
        match self {
            BackboneConfig::Mlp { input_dim, .. } if *input_dim == 0 => {
                bad("input_dim", "must be positive")
            }
            BackboneConfig::Cnn {
                height,
                width,
                in_channels,
                kernel,
                channels,
            } => {
                if *in_channels == 0 {
                    return bad("in_channels", "must be positive");
                }
                if *kernel == 0 || kernel % 2 == 0 {
                    return bad("kernel", "must be odd");
                }
                let down = 1usize << (channels.len() - 1);
                if *height == 0 || *width == 0 || height % down != 0 || width % down != 0 {
                    return bad("height", "spatial size must be divisible by 2^(stages-1)");
                }
                Ok(())
            }
            BackboneConfig::Text {
                vocab_size,
                embed_dim,
                seq_len,
                ..
            } => {
                if *vocab_size < 3 {
                    return bad("vocab_size", "needs room for pad, unknown, and one token");
                }
                if *embed_dim == 0 || *seq_len == 0 {
                    return bad("embed_dim", "embedding dim and seq_len must be positive");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
struct ConvStage {
    depthwise: ParamId,
    depthwise_bias: ParamId,
    pointwise: Dense,
    norm: Norm,
    downsample: bool,
}

#[derive(Debug, Clone)]
enum Body {
    Mlp(Vec<DenseBlock>),
    Cnn(Vec<ConvStage>),
    Text {
        embedding: ParamId,
        blocks: Vec<DenseBlock>,
    },
    Frozen,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    body: Body,
}

impl Backbone {
    /// Adds this backbone's parameters to `store`, initialised from `rng`.
    pub fn new(
        config: BackboneConfig,
        store: &mut ParamStore,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate()?;
        let body = match &config {
            BackboneConfig::Mlp { input_dim, widths } => {
                let mut blocks = Vec::new();
                let mut fan_in = *input_dim;
                for (i, &w) in widths.iter().enumerate() {
                    blocks.push(DenseBlock::new(
                        store,
                        &format!("backbone.layer{i}"),
                        fan_in,
                        w,
                        rng,
                    ));
                    fan_in = w;
                }
                Body::Mlp(blocks)
            }
            BackboneConfig::Cnn {
                in_channels,
                channels,
                kernel,
                ..
            } => {
                let mut stages = Vec::new();
                let mut cin = *in_channels;
                for (i, &cout) in channels.iter().enumerate() {
                    let name = format!("backbone.stage{i}");
                    let kk = kernel * kernel;
                    let depthwise = store.add(
                        format!("{name}.depthwise.kernel"),
                        glorot_uniform(&[*kernel, *kernel, cin], kk, kk, rng),
                    );
                    let depthwise_bias =
                        store.add(format!("{name}.depthwise.bias"), Tensor::zeros(&[cin]));
                    let pointwise = Dense::new(store, &format!("{name}.pointwise"), cin, cout, rng);
                    let norm = Norm::new(store, &format!("{name}.norm"), cout);
                    stages.push(ConvStage {
                        depthwise,
                        depthwise_bias,
                        pointwise,
                        norm,
                        downsample: i > 0,
                    });
                    cin = cout;
                }
                Body::Cnn(stages)
            }
            BackboneConfig::Text {
                vocab_size,
                embed_dim,
                widths,
                ..
            } => {
                let embedding = store.add(
                    "backbone.embedding",
                    uniform(&[*vocab_size, *embed_dim], -0.05, 0.05, rng),
                );
                let mut blocks = Vec::new();
                let mut fan_in = *embed_dim;
                for (i, &w) in widths.iter().enumerate() {
                    blocks.push(DenseBlock::new(
                        store,
                        &format!("backbone.block{i}"),
                        fan_in,
                        w,
                        rng,
                    ));
                    fan_in = w;
                }
                Body::Text { embedding, blocks }
            }
            BackboneConfig::Frozen { .. } => Body::Frozen,
        };
        Ok(Backbone { config, body })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn dims(&self) -> Vec<usize> {
        self.config.dims()
    }

    pub fn num_layers(&self) -> usize {
        self.config.dims().len()
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, inputs: &Inputs) -> Result<LayerStates> {
        match (&self.config, inputs) {
            (BackboneConfig::Mlp { input_dim, .. }, Inputs::Dense { width, data }) => {
                if width != input_dim {
                    return Err(Error::Dimension(format!(
                        "mlp expects input width {input_dim}, got {width}"
                    )));
                }
                let x = g.constant(Tensor::new(vec![data.len() / width, *width], data.clone())?);
                self.forward_var(g, p, x)
            }
            (
                BackboneConfig::Cnn {
                    height,
                    width: w,
                    in_channels,
                    ..
                },
                Inputs::Dense { width, data },
            ) => {
                let per = height * w * in_channels;
                if *width != per {
                    return Err(Error::Dimension(format!(
                        "cnn expects {height}×{w}×{in_channels} = {per} values per image, got {width}"
                    )));
                }
                let shape = vec![data.len() / per, *height, *w, *in_channels];
                let x = g.constant(Tensor::new(shape, data.clone())?);
                self.forward_var(g, p, x)
            }
            (
                BackboneConfig::Text {
                    vocab_size,
                    seq_len: cfg_len,
                    ..
                },
                Inputs::Tokens { seq_len, ids },
            ) => {
                let Body::Text { embedding, blocks } = &self.body else {
                    unreachable!("body follows config")
                };
                if seq_len != cfg_len {
                    return Err(Error::Dimension(format!(
                        "text backbone expects sequences of {cfg_len}, got {seq_len}"
                    )));
                }
                let (flat, segments) = pooled_segments(ids, *seq_len, *vocab_size)?;
                let e = g.embedding(p.var(*embedding), &flat)?;
                let mut h = g.segment_mean(e, &segments)?;
                let mut states = Vec::with_capacity(blocks.len());
                for b in blocks {
                    h = b.forward(g, p, h)?;
                    states.push(h);
                }
                self.finish(g, states)
            }
            (
                BackboneConfig::Frozen { dims },
                Inputs::Layers {
                    dims: in_dims,
                    data,
                },
            ) => {
                if in_dims != dims {
                    return Err(Error::Dimension(format!(
                        "frozen features have dims {in_dims:?}, expected {dims:?}"
                    )));
                }
                let n = inputs.len();
                let states = data
                    .iter()
                    .zip(in_dims)
                    .map(|(x, &d)| Ok(g.constant(Tensor::new(vec![n, d], x.clone())?)))
                    .collect::<Result<Vec<_>>>()?;
                self.finish(g, states)
            }
            _ => Err(Error::Dimension(
                "input kind does not match the backbone kind".into(),
            )),
        }
    }

    /// MLP and CNN forward from an input already on the graph: `[n × input_dim]`
    /// for the MLP, `[n × H × W × C]` for the CNN.
    pub fn forward_var(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<LayerStates> {
        let mut h = x;
        let mut states = Vec::new();
        match &self.body {
            Body::Mlp(blocks) => {
                for b in blocks {
                    h = b.forward(g, p, h)?;
                    states.push(h);
                }
            }
            Body::Cnn(stages) => {
                if g.shape(h).len() != 4 {
                    return Err(Error::Dimension(format!(
                        "cnn expects a rank-4 image batch, got {:?}",
                        g.shape(h)
                    )));
                }
                for st in stages {
                    if st.downsample {
                        h = g.avg_pool2(h)?;
                    }
                    h = g.depthwise_conv2d(h, p.var(st.depthwise), p.var(st.depthwise_bias))?;
                    h = st.pointwise.forward(g, p, h)?;
                    h = st.norm.forward(g, p, h)?;
                    h = g.gelu(h);
                    states.push(g.global_avg_pool(h)?);
                }
            }
            _ => {
                return Err(Error::Dimension(
                    "only mlp and cnn backbones take a raw input tensor".into(),
                ))
            }
        }
        self.finish(g, states)
    }

    fn finish(&self, g: &Graph, states: Vec<Var>) -> Result<LayerStates> {
        let ls = LayerStates {
            states,
            dims: self.dims(),
        };
        ls.validate(g)?;
        Ok(ls)
    }
}

/// Non-padding token ids of every row, flattened, plus each row's range.
fn pooled_segments(
    ids: &[u32],
    seq_len: usize,
    vocab: usize,
) -> Result<(Vec<usize>, Vec<Range<usize>>)> {
    let mut flat = Vec::new();
    let mut segments = Vec::with_capacity(ids.len() / seq_len);
    for (r, row) in ids.chunks_exact(seq_len).enumerate() {
        let start = flat.len();
        for &t in row {
            if t as usize >= vocab {
                return Err(Error::Data(format!(
                    "token id {t} in row {r} is outside the vocabulary of {vocab}"
                )));
            }
            if t != PAD_ID {
                flat.push(t as usize);
            }
        }
        if flat.len() == start {
            return Err(Error::Data(format!("row {r} contains only padding")));
        }
        segments.push(start..flat.len());
    }
    Ok((flat, segments))
}
