//! Record-on-forward tape and reverse-mode backward pass.
//!
//! Each primitive appends one node holding its output value and the ids of
//! its inputs. [`Graph::backward`] walks the nodes in exact reverse
//! execution order and accumulates input gradients additively into
//! zero-initialised buffers.

use std::ops::Range;

use super::kernels::{gemm, Trans};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Log(Var),
    SumAll(Var),
    MeanAll(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        s: Var,
        tau: f64,
    },
    ConcatCols(Vec<Var>),
    LayerMix {
        alpha: Var,
        zs: Vec<Var>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        segments: Vec<Range<usize>>,
    },
    DepthwiseConv {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dim_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// `a[..., k] · b[k, n] -> [..., n]`; leading axes of `a` act as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.last() != Some(&sb[0]) {
            return Err(dim_err("matmul", sa, sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).rows();
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Trans::No,
            self.value(b).data(),
            Trans::No,
            &mut out,
            0.0,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Adds `b[d]` to every row of `x[..., d]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let d = *sx.last().unwrap();
        if self.value(b).numel() != d {
            return Err(dim_err("add_bias", sx, sb));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("mul", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Exact erf-based GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu_scalar(*v));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.ln());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Log(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Normalises every row of `x[..., d]` to zero mean and unit variance,
    /// then applies `gain ⊙ x̂ + offset`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        if self.value(gain).numel() != d || self.value(offset).numel() != d {
            return Err(dim_err("layer_norm", &sx, self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::Parameter(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        let (g, o) = (self.value(gain).data(), self.value(offset).data());
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            let xh = &mut xhat[r * d..(r + 1) * d];
            let y = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                xh[j] = (row[j] - mean) * is;
                y[j] = g[j] * xh[j] + o[j];
            }
        }
        let rg = self.any_grad(&[x, gain, offset]);
        Ok(self.push(
            Tensor::new(sx, out)?,
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row-wise `softmax(s / tau)` over the trailing axis, max-subtracted.
    pub fn softmax_temperature(&mut self, s: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Parameter(format!(
                "softmax temperature must be > 0, got {tau}"
            )));
        }
        let mut out = self.value(s).clone();
        let d = out.last_dim();
        for row in out.data_mut().chunks_exact_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = ((*v - max) / tau).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.any_grad(&[s]);
        Ok(self.push(out, Op::Softmax { s, tau }, rg))
    }

    /// Concatenates `[n, d_i]` matrices along the feature axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let n = self.value(*first).rows();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = self.value(x);
            if t.shape().len() != 2 || t.rows() != n {
                return Err(dim_err("concat_cols", self.shape(*first), t.shape()));
            }
            widths.push(t.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        let rg = self.any_grad(xs);
        Ok(self.push(
            Tensor::new(vec![n, total], out)?,
            Op::ConcatCols(xs.to_vec()),
            rg,
        ))
    }

    /// `out[r] = Σ_i alpha[r, i] · zs[i][r]`. `alpha` is `[n, L]`, or `[L]`
    /// / `[1, L]` to share one weighting across all rows.
    pub fn layer_mix(&mut self, alpha: Var, zs: &[Var]) -> Result<Var> {
        let l = zs.len();
        let at = self.value(alpha);
        if l == 0 || at.last_dim() != l {
            return Err(dim_err("layer_mix", at.shape(), &[l]));
        }
        let z0 = self.value(zs[0]).shape().to_vec();
        if z0.len() != 2 {
            return Err(dim_err("layer_mix", &z0, at.shape()));
        }
        let (n, d) = (z0[0], z0[1]);
        let shared = at.rows() == 1;
        if !shared && at.rows() != n {
            return Err(dim_err("layer_mix", at.shape(), &z0));
        }
        for &z in zs {
            if self.shape(z) != z0.as_slice() {
                return Err(dim_err("layer_mix", &z0, self.shape(z)));
            }
        }
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let arow = self.value(alpha).row(if shared { 0 } else { r });
            let orow = &mut out[r * d..(r + 1) * d];
            for (i, &z) in zs.iter().enumerate() {
                let a = arow[i];
                for (o, zv) in orow.iter_mut().zip(self.value(z).row(r)) {
                    *o += a * zv;
                }
            }
        }
        let mut inputs = zs.to_vec();
        inputs.push(alpha);
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::LayerMix {
                alpha,
                zs: zs.to_vec(),
            },
            rg,
        ))
    }

    /// Gathers rows of `table[V, e]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "embedding table must be 2-D, got {:?}",
                t.shape()
            )));
        }
        let (v, e) = (t.shape()[0], t.shape()[1]);
        if ids.is_empty() {
            return Err(Error::Dimension("embedding lookup of zero ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::Data(format!(
                    "token id {id} out of vocabulary of {v}"
                )));
            }
            out.extend_from_slice(t.row(id));
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), e], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean of each contiguous row range of `x[n, e]`.
    pub fn segment_mean(&mut self, x: Var, segments: &[Range<usize>]) -> Result<Var> {
        let t = self.value(x);
        let (n, e) = (t.rows(), t.last_dim());
        if segments.is_empty() {
            return Err(Error::Dimension("segment_mean of zero segments".into()));
        }
        let mut out = vec![0.0; segments.len() * e];
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() || seg.end > n {
                return Err(Error::Data(format!(
                    "segment {s} ({seg:?}) is empty or exceeds {n} rows"
                )));
            }
            let inv = 1.0 / seg.len() as f64;
            let o = &mut out[s * e..(s + 1) * e];
            for r in seg.clone() {
                for (ov, xv) in o.iter_mut().zip(t.row(r)) {
                    *ov += xv * inv;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![segments.len(), e], out)?,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    /// Same-size depthwise convolution, stride 1, with edge-replicate
    /// padding (out-of-range taps read the nearest border pixel).
    /// `x[B, H, W, C]`, `kernel[K, K, C]` with odd `K`, `bias[C]`.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 4 || sk.len() != 3 || sk[0] != sk[1] || sk[0] % 2 == 0 || sk[2] != sx[3] {
            return Err(dim_err("depthwise_conv2d", &sx, &sk));
        }
        if self.value(bias).numel() != sx[3] {
            return Err(dim_err("depthwise_conv2d", &sx, self.shape(bias)));
        }
        let (b, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
        let k = sk[0];
        let pad = (k / 2) as isize;
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let o = &mut out[((bi * h + y) * w + xx) * c..][..c];
                    o.copy_from_slice(bd);
                    for ky in 0..k {
                        let iy = clamp_index(y, ky, pad, h);
                        for kx in 0..k {
                            let ix = clamp_index(xx, kx, pad, w);
                            let src = &xd[((bi * h + iy) * w + ix) * c..][..c];
                            let kv = &kd[(ky * k + kx) * c..][..c];
                            for ch in 0..c {
                                o[ch] += kv[ch] * src[ch];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.any_grad(&[x, kernel, bias]);
        Ok(self.push(
            Tensor::new(sx, out)?,
            Op::DepthwiseConv { x, kernel, bias },
            rg,
        ))
    }

    /// 2×2 average pooling with stride 2 on `x[B, H, W, C]` (H, W even).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || sx[1] % 2 != 0 || sx[2] % 2 != 0 {
            return Err(Error::Dimension(format!(
                "avg_pool2 needs [B, even H, even W, C], got {sx:?}"
            )));
        }
        let (b, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * ho * wo * c];
        for bi in 0..b {
            for y in 0..ho {
                for xx in 0..wo {
                    let o = &mut out[((bi * ho + y) * wo + xx) * c..][..c];
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let src = &xd[((bi * h + 2 * y + dy) * w + 2 * xx + dx) * c..][..c];
                        for ch in 0..c {
                            o[ch] += 0.25 * src[ch];
                        }
                    }
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![b, ho, wo, c], out)?, Op::AvgPool2(x), rg))
    }

    /// Mean over the spatial axes: `[B, H, W, C] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::Dimension(format!(
                "global_avg_pool needs [B, H, W, C], got {sx:?}"
            )));
        }
        let (b, hw, c) = (sx[0], sx[1] * sx[2], sx[3]);
        let xd = self.value(x).data();
        let inv = 1.0 / hw as f64;
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let o = &mut out[bi * c..(bi + 1) * c];
            for p in 0..hw {
                for (ov, xv) in o.iter_mut().zip(&xd[(bi * hw + p) * c..][..c]) {
                    *ov += xv * inv;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![b, c], out)?, Op::GlobalAvgPool(x), rg))
    }

    /// Mean softmax cross-entropy of `logits[n, C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 2 || t.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy: logits {:?} vs {} labels",
                t.shape(),
                labels.len()
            )));
        }
        let c = t.last_dim();
        let n = labels.len();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Data(format!(
                    "label {y} out of range for {c} classes"
                )));
            }
            let row = t.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * c..(r + 1) * c];
            let mut z = 0.0;
            for (pv, &lv) in p.iter_mut().zip(row) {
                *pv = (lv - max).exp();
                z += *pv;
            }
            p.iter_mut().for_each(|v| *v /= z);
            loss += -(row[y] - max - z.ln());
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`; consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        // Zero-initialised accumulation buffer for `v`.
        fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'g mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (k, n) = (val(*b).shape()[0], val(*b).shape()[1]);
                let m = val(*a).rows();
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    gemm(
                        m,
                        n,
                        k,
                        gout,
                        Trans::No,
                        val(*b).data(),
                        Trans::Yes,
                        ga,
                        1.0,
                    );
                }
                if wants(*b) {
                    let gb = acc(grads, nodes, *b);
                    gemm(
                        k,
                        m,
                        n,
                        val(*a).data(),
                        Trans::Yes,
                        gout,
                        Trans::No,
                        gb,
                        1.0,
                    );
                }
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    add_into(acc(grads, nodes, *x), gout);
                }
                if wants(*b) {
                    let d = val(*b).numel();
                    let gb = acc(grads, nodes, *b);
                    for row in gout.chunks_exact(d) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        add_into(acc(grads, nodes, v), gout);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = val(*b).data();
                    let ga = acc(grads, nodes, *a);
                    for ((g, go), o) in ga.iter_mut().zip(gout).zip(other) {
                        *g += go * o;
                    }
                }
                if wants(*b) {
                    let other = val(*a).data();
                    let gb = acc(grads, nodes, *b);
                    for ((g, go), o) in gb.iter_mut().zip(gout).zip(other) {
                        *g += go * o;
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    let gx = acc(grads, nodes, *x);
                    for (g, go) in gx.iter_mut().zip(gout) {
                        *g += c * go;
                    }
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xv = val(*x).data();
                    let gx = acc(grads, nodes, *x);
                    for ((g, go), &xi) in gx.iter_mut().zip(gout).zip(xv) {
                        *g += go * gelu_grad_scalar(xi);
                    }
                }
            }
            Op::Log(x) => {
                if wants(*x) {
                    let xv = val(*x).data();
                    let gx = acc(grads, nodes, *x);
                    for ((g, go), &xi) in gx.iter_mut().zip(gout).zip(xv) {
                        *g += go / xi;
                    }
                }
            }
            Op::SumAll(x) => {
                if wants(*x) {
                    acc(grads, nodes, *x).iter_mut().for_each(|g| *g += gout[0]);
                }
            }
            Op::MeanAll(x) => {
                if wants(*x) {
                    let s = gout[0] / val(*x).numel() as f64;
                    acc(grads, nodes, *x).iter_mut().for_each(|g| *g += s);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                inv_std,
            } => {
                let d = val(*gain).numel();
                if wants(*gain) {
                    let gg = acc(grads, nodes, *gain);
                    for (row_g, row_x) in gout.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += row_g[j] * row_x[j];
                        }
                    }
                }
                if wants(*offset) {
                    let go = acc(grads, nodes, *offset);
                    for row_g in gout.chunks_exact(d) {
                        add_into(go, row_g);
                    }
                }
                if wants(*x) {
                    let gain_v = val(*gain).data();
                    let gx = acc(grads, nodes, *x);
                    let mut dxhat = vec![0.0; d];
                    for (r, is) in inv_std.iter().enumerate() {
                        let row_g = &gout[r * d..(r + 1) * d];
                        let row_x = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = row_g[j] * gain_v[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * row_x[j];
                        }
                        let inv_d = 1.0 / d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += is * (dxhat[j] - inv_d * s1 - row_x[j] * inv_d * s2);
                        }
                    }
                }
            }
            Op::Softmax { s, tau } => {
                if wants(*s) {
                    let alpha = node.value.data();
                    let d = node.value.last_dim();
                    let gs = acc(grads, nodes, *s);
                    for ((g, a), go) in gs
                        .chunks_exact_mut(d)
                        .zip(alpha.chunks_exact(d))
                        .zip(gout.chunks_exact(d))
                    {
                        let dot: f64 = a.iter().zip(go).map(|(x, y)| x * y).sum();
                        for j in 0..d {
                            g[j] += a[j] * (go[j] - dot) / tau;
                        }
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.last_dim();
                let mut off = 0;
                for &x in xs {
                    let w = val(x).last_dim();
                    if wants(x) {
                        let gx = acc(grads, nodes, x);
                        for (r, row) in gx.chunks_exact_mut(w).enumerate() {
                            add_into(row, &gout[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::LayerMix { alpha, zs } => {
                let d = node.value.last_dim();
                let n = node.value.rows();
                let l = zs.len();
                let shared = val(*alpha).rows() == 1;
                let av = val(*alpha).data();
                for (i, &z) in zs.iter().enumerate() {
                    if wants(z) {
                        let gz = acc(grads, nodes, z);
                        for r in 0..n {
                            let a = av[if shared { 0 } else { r } * l + i];
                            for (g, go) in gz[r * d..(r + 1) * d].iter_mut().zip(&gout[r * d..]) {
                                *g += a * go;
                            }
                        }
                    }
                }
                if wants(*alpha) {
                    let mut ga = vec![0.0; av.len()];
                    for r in 0..n {
                        let go = &gout[r * d..(r + 1) * d];
                        let ar = if shared { 0 } else { r };
                        for (i, &z) in zs.iter().enumerate() {
                            let zr = val(z).row(r);
                            ga[ar * l + i] += go.iter().zip(zr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    add_into(acc(grads, nodes, *alpha), &ga);
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let e = val(*table).last_dim();
                    let gt = acc(grads, nodes, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * e..(id + 1) * e], &gout[r * e..(r + 1) * e]);
                    }
                }
            }
            Op::SegmentMean { x, segments } => {
                if wants(*x) {
                    let e = val(*x).last_dim();
                    let gx = acc(grads, nodes, *x);
                    for (s, seg) in segments.iter().enumerate() {
                        let inv = 1.0 / seg.len() as f64;
                        let go = &gout[s * e..(s + 1) * e];
                        for r in seg.clone() {
                            for (g, gv) in gx[r * e..(r + 1) * e].iter_mut().zip(go) {
                                *g += gv * inv;
                            }
                        }
                    }
                }
            }
            Op::DepthwiseConv { x, kernel, bias } => {
                let sx = val(*x).shape();
                let (b, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
                let k = val(*kernel).shape()[0];
                let pad = (k / 2) as isize;
                if wants(*bias) {
                    let gb = acc(grads, nodes, *bias);
                    for row in gout.chunks_exact(c) {
                        add_into(gb, row);
                    }
                }
                let want_x = wants(*x);
                let want_k = wants(*kernel);
                let mut gx = if want_x {
                    vec![0.0; b * h * w * c]
                } else {
                    Vec::new()
                };
                let mut gk = if want_k {
                    vec![0.0; k * k * c]
                } else {
                    Vec::new()
                };
                let xd = val(*x).data();
                let kd = val(*kernel).data();
                for bi in 0..b {
                    for y in 0..h {
                        for xx in 0..w {
                            let go = &gout[((bi * h + y) * w + xx) * c..][..c];
                            for ky in 0..k {
                                let iy = clamp_index(y, ky, pad, h);
                                for kx in 0..k {
                                    let ix = clamp_index(xx, kx, pad, w);
                                    let src = ((bi * h + iy) * w + ix) * c;
                                    let kof = (ky * k + kx) * c;
                                    if want_x {
                                        let gxs = &mut gx[src..src + c];
                                        let kv = &kd[kof..kof + c];
                                        for ch in 0..c {
                                            gxs[ch] += kv[ch] * go[ch];
                                        }
                                    }
                                    if want_k {
                                        let gks = &mut gk[kof..kof + c];
                                        let xs = &xd[src..src + c];
                                        for ch in 0..c {
                                            gks[ch] += xs[ch] * go[ch];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if want_x {
                    add_into(acc(grads, nodes, *x), &gx);
                }
                if want_k {
                    add_into(acc(grads, nodes, *kernel), &gk);
                }
            }
            Op::AvgPool2(x) => {
                if wants(*x) {
                    let sx = val(*x).shape();
                    let (b, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
                    let (ho, wo) = (h / 2, w / 2);
                    let gx = acc(grads, nodes, *x);
                    for bi in 0..b {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let go = &gout[((bi * ho + y) * wo + xx) * c..][..c];
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let dst = &mut gx
                                        [((bi * h + 2 * y + dy) * w + 2 * xx + dx) * c..][..c];
                                    for ch in 0..c {
                                        dst[ch] += 0.25 * go[ch];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                if wants(*x) {
                    let sx = val(*x).shape();
                    let (b, hw, c) = (sx[0], sx[1] * sx[2], sx[3]);
                    let inv = 1.0 / hw as f64;
                    let gx = acc(grads, nodes, *x);
                    for bi in 0..b {
                        let go = &gout[bi * c..(bi + 1) * c];
                        for p in 0..hw {
                            for (g, gv) in gx[(bi * hw + p) * c..][..c].iter_mut().zip(go) {
                                *g += gv * inv;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if wants(*logits) {
                    let c = val(*logits).last_dim();
                    let s = gout[0] / labels.len() as f64;
                    let gl = acc(grads, nodes, *logits);
                    for (r, &y) in labels.iter().enumerate() {
                        let p = &probs[r * c..(r + 1) * c];
                        let g = &mut gl[r * c..(r + 1) * c];
                        for j in 0..c {
                            g[j] += s * (p[j] - if j == y { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
        }
    }
}

fn clamp_index(pos: usize, tap: usize, pad: isize, len: usize) -> usize {
    (pos as isize + tap as isize - pad).clamp(0, len as isize - 1) as usize
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
