//! Parameterised building blocks shared by backbones and heads.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;
use crate::params::{glorot_uniform, Bound, ParamId, ParamStore};
use crate::rng::SeededRng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `x W + b`, Glorot-uniform weights and zero bias.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            glorot_uniform(&[fan_in, fan_out], fan_in, fan_out, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Dense {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn num_params(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = g.matmul(x, p.var(self.weight))?;
        g.add_bias(h, p.var(self.bias))
    }
}

/// LayerNorm gain (ones) and offset (zeros) over a trailing axis of width `d`.
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[d], 1.0)),
            offset: store.add(format!("{name}.offset"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gain), p.var(self.offset), LAYER_NORM_EPS)
    }
}

/// Dense → LayerNorm → GELU.
#[derive(Debug, Clone, Copy)]
pub struct DenseBlock {
    pub dense: Dense,
    pub norm: Norm,
}

impl DenseBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut SeededRng,
    ) -> Self {
        DenseBlock {
            dense: Dense::new(store, &format!("{name}.dense"), fan_in, fan_out, rng),
            norm: Norm::new(store, &format!("{name}.norm"), fan_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.dense.forward(g, p, x)?;
        let h = self.norm.forward(g, p, h)?;
        Ok(g.gelu(h))
    }
}
