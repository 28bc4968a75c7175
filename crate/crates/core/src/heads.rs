//! Output heads mapping [`LayerStates`] to class logits.
//!
//! * `last_layer`: `W h_L + b`.
//! * `concat`: `W · gelu(P [g_1(h_1) .. g_L(h_L)] + p) + b`.
//! * `scalar_mix`: `α = softmax(s)` with a learned, input-independent `s`.
//! * `laya`: `z_i = g_i(h_i)`, `u_i = ψ(z_i)`, `α(x) = softmax(MLP([u_1..u_L]) / τ)`,
//!   `logits = W Σ α_i(x) z_i + b`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::backbones::LayerStates;
use crate::error::{Error, Result};
use crate::nn::Dense;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    LastLayer,
    Concat,
    ScalarMix,
    Laya,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [
        HeadKind::LastLayer,
        HeadKind::Concat,
        HeadKind::ScalarMix,
        HeadKind::Laya,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::LastLayer => "last_layer",
            HeadKind::Concat => "concat",
            HeadKind::ScalarMix => "scalar_mix",
            HeadKind::Laya => "laya",
        }
    }

    pub fn emits_attention(self) -> bool {
        matches!(self, HeadKind::ScalarMix | HeadKind::Laya)
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiKind {
    Identity,
    /// Two `d* → d*` layers with GELU between, shared by all layers.
    Mlp,
}

impl PsiKind {
    pub fn name(self) -> &'static str {
        match self {
            PsiKind::Identity => "identity",
            PsiKind::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKind,
    #[serde(default = "default_d_star")]
    pub d_star: usize,
    /// Only read by `laya`.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Only read by `laya`.
    #[serde(default = "default_psi")]
    pub psi_kind: PsiKind,
    /// Only read by `laya`.
    #[serde(default = "default_scorer_width")]
    pub scorer_width: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
}

fn default_d_star() -> usize {
    96
}
fn default_tau() -> f64 {
    1.0
}
fn default_psi() -> PsiKind {
    PsiKind::Identity
}
fn default_scorer_width() -> usize {
    192
}
fn default_classes() -> usize {
    10
}

impl HeadConfig {
    pub fn new(kind: HeadKind, num_classes: usize) -> Self {
        HeadConfig {
            kind,
            d_star: default_d_star(),
            tau: default_tau(),
            psi_kind: default_psi(),
            scorer_width: default_scorer_width(),
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_star == 0 {
            return Err(Error::config("head.d_star", "must be ≥ 1"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("head.num_classes", "must be ≥ 1"));
        }
        if self.kind == HeadKind::Laya {
            if !(self.tau > 0.0) || !self.tau.is_finite() {
                return Err(Error::Parameter(format!(
                    "head.tau must be > 0, got {}",
                    self.tau
                )));
            }
            if self.scorer_width == 0 {
                return Err(Error::config("head.scorer_width", "must be ≥ 1"));
            }
        }
        Ok(())
    }
}

/// Closed-form number of trainable scalars in a head over layers of `dims`.
pub fn count_parameters(config: &HeadConfig, dims: &[usize]) -> usize {
    let l = dims.len();
    let ds = config.d_star;
    let c = config.num_classes;
    let adapters: usize = dims.iter().map(|d| d * ds + ds).sum();
    let classifier = |dim: usize| dim * c + c;
    match config.kind {
        HeadKind::LastLayer => classifier(dims.last().copied().unwrap_or(0)),
        HeadKind::Concat => adapters + (l * ds * ds + ds) + classifier(ds),
        HeadKind::ScalarMix => adapters + l + classifier(ds),
        HeadKind::Laya => {
            let w = config.scorer_width;
            let psi = match config.psi_kind {
                PsiKind::Identity => 0,
                PsiKind::Mlp => 2 * (ds * ds + ds),
            };
            adapters + psi + (l * ds * w + w) + (w * l + l) + classifier(ds)
        }
    }
}

/// Result of a head's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub logits: Var,
    /// `[n × L]` for `laya`, `[1 × L]` (shared by every row) for `scalar_mix`.
    pub alpha: Option<Var>,
    /// The vector fed to the classifier.
    pub h_agg: Var,
}

impl HeadOutput {
    /// Attention weights as one row per sample.
    pub fn alpha_rows(&self, g: &Graph) -> Option<Tensor> {
        let a = g.value(self.alpha?);
        let n = g.value(self.logits).rows();
        if a.rows() == n {
            return Some(a.clone());
        }
        let l = a.last_dim();
        let data = (0..n).flat_map(|_| a.row(0).iter().copied()).collect();
        Tensor::new(vec![n, l], data).ok()
    }
}

#[derive(Debug, Clone)]
pub struct Head {
    config: HeadConfig,
    dims: Vec<usize>,
    adapters: Vec<Dense>,
    psi: Option<[Dense; 2]>,
    scorer: Option<[Dense; 2]>,
    mix_logits: Option<ParamId>,
    post: Option<Dense>,
    classifier: Dense,
}

impl Head {
    /// Adds the head's parameters to `store`. ScalarMix logits start at zero.
    pub fn new(
        config: HeadConfig,
        dims: &[usize],
        store: &mut ParamStore,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate()?;
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::config(
                "head",
                format!("invalid layer dims {dims:?}"),
            ));
        }
        let ds = config.d_star;
        let l = dims.len();
        let c = config.num_classes;
        let mut adapters = Vec::new();
        if config.kind != HeadKind::LastLayer {
            for (i, &d) in dims.iter().enumerate() {
                adapters.push(Dense::new(store, &format!("head.adapter{i}"), d, ds, rng));
            }
        }
        let (mut psi, mut scorer, mut mix_logits, mut post) = (None, None, None, None);
        let classifier_in = match config.kind {
            HeadKind::LastLayer => dims[l - 1],
            HeadKind::Concat => {
                post = Some(Dense::new(store, "head.post", l * ds, ds, rng));
                ds
            }
            HeadKind::ScalarMix => {
                mix_logits = Some(store.add("head.mix_logits", Tensor::zeros(&[1, l])));
                ds
            }
            HeadKind::Laya => {
                if config.psi_kind == PsiKind::Mlp {
                    psi = Some([
                        Dense::new(store, "head.psi0", ds, ds, rng),
                        Dense::new(store, "head.psi1", ds, ds, rng),
                    ]);
                }
                let w = config.scorer_width;
                scorer = Some([
                    Dense::new(store, "head.scorer0", l * ds, w, rng),
                    Dense::new(store, "head.scorer1", w, l, rng),
                ]);
                ds
            }
        };
        let classifier = Dense::new(store, "head.classifier", classifier_in, c, rng);
        Ok(Head {
            config,
            dims: dims.to_vec(),
            adapters,
            psi,
            scorer,
            mix_logits,
            post,
            classifier,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, states: &LayerStates) -> Result<HeadOutput> {
        self.check_states(g, states)?;
        match self.config.kind {
            HeadKind::LastLayer => self.last_layer_forward(g, p, states),
            HeadKind::Concat => self.concat_forward(g, p, states),
            HeadKind::ScalarMix => self.scalar_mix_forward(g, p, states),
            HeadKind::Laya => self.laya_forward(g, p, states),
        }
    }

    fn check_states(&self, g: &Graph, states: &LayerStates) -> Result<()> {
        if states.is_empty() {
            return Err(Error::Dimension("head received no layer states".into()));
        }
        if self.config.kind != HeadKind::LastLayer && states.len() != self.adapters.len() {
            return Err(Error::config(
                "head",
                format!(
                    "{} adapters for {} layer states",
                    self.adapters.len(),
                    states.len()
                ),
            ));
        }
        for (i, &s) in states.states.iter().enumerate() {
            let expect = if self.config.kind == HeadKind::LastLayer {
                if i + 1 < states.len() {
                    continue;
                }
                self.classifier.fan_in
            } else {
                self.adapters[i].fan_in
            };
            let sh = g.shape(s);
            if sh.len() != 2 || sh[1] != expect {
                return Err(Error::Dimension(format!(
                    "layer state {i} has shape {sh:?}, head expects width {expect}"
                )));
            }
        }
        Ok(())
    }

    fn adapt(&self, g: &mut Graph, p: &Bound, states: &LayerStates) -> Result<Vec<Var>> {
        self.adapters
            .iter()
            .zip(&states.states)
            .map(|(a, &h)| a.forward(g, p, h))
            .collect()
    }

    fn classify(
        &self,
        g: &mut Graph,
        p: &Bound,
        h_agg: Var,
        alpha: Option<Var>,
    ) -> Result<HeadOutput> {
        let logits = self.classifier.forward(g, p, h_agg)?;
        Ok(HeadOutput {
            logits,
            alpha,
            h_agg,
        })
    }

    pub fn last_layer_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        states: &LayerStates,
    ) -> Result<HeadOutput> {
        let h = states
            .last()
            .ok_or_else(|| Error::Dimension("head received no layer states".into()))?;
        if g.shape(h).last() != Some(&self.classifier.fan_in) {
            return Err(Error::Dimension(format!(
                "classifier expects width {}, last state has shape {:?}",
                self.classifier.fan_in,
                g.shape(h)
            )));
        }
        self.classify(g, p, h, None)
    }

    pub fn concat_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        states: &LayerStates,
    ) -> Result<HeadOutput> {
        let post = self
            .post
            .ok_or_else(|| Error::config("head.kind", "head has no concat MLP"))?;
        let zs = self.adapt(g, p, states)?;
        let cat = g.concat_cols(&zs)?;
        let h = post.forward(g, p, cat)?;
        let h = g.gelu(h);
        self.classify(g, p, h, None)
    }

    pub fn scalar_mix_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        states: &LayerStates,
    ) -> Result<HeadOutput> {
        let s = self
            .mix_logits
            .ok_or_else(|| Error::config("head.kind", "head has no mixing logits"))?;
        let zs = self.adapt(g, p, states)?;
        let alpha = g.softmax_temperature(p.var(s), 1.0)?;
        let h = g.layer_mix(alpha, &zs)?;
        self.classify(g, p, h, Some(alpha))
    }

    pub fn laya_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        states: &LayerStates,
    ) -> Result<HeadOutput> {
        let [s0, s1] = self
            .scorer
            .ok_or_else(|| Error::config("head.kind", "head has no scorer"))?;
        let zs = self.adapt(g, p, states)?;
        let us = match self.psi {
            None => zs.clone(),
            Some([a, b]) => zs
                .iter()
                .map(|&z| {
                    let t = a.forward(g, p, z)?;
                    let t = g.gelu(t);
                    b.forward(g, p, t)
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let u = g.concat_cols(&us)?;
        let hidden = s0.forward(g, p, u)?;
        let hidden = g.gelu(hidden);
        let scores = s1.forward(g, p, hidden)?;
        let alpha = g.softmax_temperature(scores, self.config.tau)?;
        let h = g.layer_mix(alpha, &zs)?;
        self.classify(g, p, h, Some(alpha))
    }
}
