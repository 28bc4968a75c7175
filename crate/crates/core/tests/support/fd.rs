//! Finite-difference suites shared by the gradient tests and the acceptance run.

use laya::autodiff::gradcheck::{check, GradCheckReport};
use laya::autodiff::{Graph, Tensor, Var};
use laya::backbones::LayerStates;
use laya::heads::{Head, HeadConfig, HeadKind, PsiKind};
use laya::params::{Bound, ParamStore};
use laya::rng::{SeededRng, Stream};
use laya::Result;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

pub type Case = Box<dyn Fn(u64) -> GradCheckReport>;

pub fn rand(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform(lo, hi)).collect(),
    )
    .unwrap()
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output coordinate matters.
fn weighted_sum(g: &mut Graph, out: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = SeededRng::new(rng_seed, Stream::Synthetic);
    let w = rand(g.shape(out), -1.0, 1.0, &mut rng);
    let wv = g.constant(w);
    let p = g.mul(out, wv)?;
    Ok(g.sum(p))
}

/// One named builder per primitive; each maps an instance seed to a report.
pub fn primitive_cases() -> Vec<(&'static str, Case)> {
    let mut cases: Vec<(&'static str, Case)> = Vec::new();
    cases.push((
        "matmul",
        Box::new(|s| {
            let mut r = SeededRng::new(s, Stream::Init);
            let (m, k, n) = (1 + r.below(4), 1 + r.below(5), 1 + r.below(4));
            let ins = [
                rand(&[m, k], -1.0, 1.0, &mut r),
                rand(&[k, n], -1.0, 1.0, &mut r),
            ];
            check(&ins, EPS, None, |g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, s)
            })
            .unwrap()
        }),
    ));

    cases.push((
        "pointwise_conv",
        Box::new(|s| {
            let mut r = SeededRng::new(s, Stream::Init);
            let (c, o) = (1 + r.below(3), 1 + r.below(3));
            let ins = [
                rand(&[2, 3, 3, c], -1.0, 1.0, &mut r),
                rand(&[c, o], -1.0, 1.0, &mut r),
            ];
            check(&ins, EPS, None, |g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, s)
            })
            .unwrap()
        }),
    ));

    cases.push((
        "add_bias",
        Box::new(|s| {
            let mut r = SeededRng::new(s, Stream::Init);
            let d = 1 + r.below(5);
            let ins = [
                rand(&[3, d], -1.0, 1.0, &mut r),
                rand(&[d], -1.0, 1.0, &mut r),
            ];
            check(&ins, EPS, None, |g, v| {
                let y = g.add_bias(v[0], v[1])?;
                weighted_sum(g, y, s)
            })
            .unwrap()
        }),
    ));

    cases.push((
        "add",
        Box::new(|s| {
            let mut r = SeededRng::new(s, Stream::Init);
            let ins = [
                rand(&[2, 3], -1.0, 1.0, &mut r),
                rand(&[2, 3], -1.0, 1.0, &mut r),
            ];
            check(&ins, EPS, None, |g, v| {
                let y = g.add(v[0], v[1])?;
                weighted_sum(g, y, s)
            })
            .unwrap()
        }),
    ));

    cases.push((
        "mul",
        Box::new(|s| {
            let mut r = SeededRng::new(s, Stream::Init);
            let ins = [
                rand(&[3, 2], -2.0, 2.0, &mut r),
                rand(&[3, 2], -2.0, 2.0, &mut r),
            ];
            check(&ins, EPS, None, |g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted_sum(g, y, s)
            })
            .unwrap()
        }),
    ));

    cases.push((
        "scale",
        Box::new(|s| {
            let mut r = SeededRng::new(s, Stream::Init);
            let c = r.uniform(-3.0, 3.0);
            let ins = [rand(&[4], -1.0, 1.0, &mut r)];
            check(&ins, EPS, None, |g, v| {
                let y = g.scale(v[0], c);
                weighted_sum(g, y, s)
            })
            .unwrap()
        }),
    ));

    cases.push((
        "gelu",
        Box::new(|s| {
            let mut r = SeededRng::new(s, Stream::Init);
            let ins = [rand(&[2, 5], -4.0, 4.0, &mut r)];
            check(&ins, EPS, None, |g, v| {
                let y = g.gelu(v[0]);
                weighted_sum(g, y, s)
            })
            .unwrap()
        }),
    ));

    cases.push((
        "log",
        Box::new(|s| {
            let mut r = SeededRng::new(s, Stream::Init);
            let ins = [rand(&[2, 4], 0.2, 3.0, &mut r)];
            check(&ins, EPS, None, |g, v| {
                let y = g.log(v[0]);
                weighted_sum(g, y, s)
            })
            .unwrap()
        }),
    ));

    cases.push((
        "sum_mean",
        Box::new(|s| {
            let mut r = SeededRng::new(s, Stream::Init);
            let ins = [rand(&[3, 3], -1.0, 1.0, &mut r)];
            check(&ins, EPS, None, |g, v| {
                let sq = g.mul(v[0], v[0])?;
                let a = g.sum(sq);
                let m = g.mean(v[0]);
                let m3 = g.scale(m, 3.0);
                g.add(a, m3)
            })
            .unwrap()
        }),
    ));

    cases.push((
        "layer_norm",
        Box::new(|s| {
            let mut r = SeededRng::new(s, Stream::Init);
            let d = 2 + r.below(5);
            let ins = [
                rand(&[3, d], -2.0, 2.0, &mut r),
                rand(&[d], 0.5, 1.5, &mut r),
                rand(&[d], -0.5, 0.5, &mut r),
            ];
            check(&ins, EPS, None, |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(g, y, s)
            })
            .unwrap()
        }),
    ));

    cases.push((
        "softmax_temperature",
        Box::new(|s| {
            let mut r = SeededRng::new(s, Stream::Init);
            let tau = r.uniform(0.25, 4.0);
            let ins = [rand(&[3, 1 + r.below(5)], -2.0, 2.0, &mut r)];
            check(&ins, EPS, None, |g, v| {
                let y = g.softmax_temperature(v[0], tau)?;
                weighted_sum(g, y, s)
            })
            .unwrap()
        }),
    ));

    cases.push((
        "concat_cols",
        Box::new(|s| {
            let mut r = SeededRng::new(s, Stream::Init);
            let ins = [
                rand(&[2, 1 + r.below(3)], -1.0, 1.0, &mut r),
                rand(&[2, 1 + r.below(3)], -1.0, 1.0, &mut r),
                rand(&[2, 1 + r.below(3)], -1.0, 1.0, &mut r),
            ];
            check(&ins, EPS, None, |g, v| {
                let y = g.concat_cols(v)?;
                weighted_sum(g, y, s)
            })
            .unwrap()
        }),
    ));

    cases.push((
        "layer_mix",
        Box::new(|s| {
            let mut r = SeededRng::new(s, Stream::Init);
            let shared = s % 2 == 0;
            let rows = if shared { 1 } else { 3 };
            let ins = [
                rand(&[rows, 2], 0.0, 1.0, &mut r),
                rand(&[3, 4], -1.0, 1.0, &mut r),
                rand(&[3, 4], -1.0, 1.0, &mut r),
            ];
            check(&ins, EPS, None, |g, v| {
                let y = g.layer_mix(v[0], &v[1..])?;
                weighted_sum(g, y, s)
            })
            .unwrap()
        }),
    ));

    cases.push((
        "embedding",
        Box::new(|s| {
            let mut r = SeededRng::new(s, Stream::Init);
            let ids: Vec<usize> = (0..6).map(|_| r.below(5)).collect();
            let ins = [rand(&[5, 3], -1.0, 1.0, &mut r)];
            check(&ins, EPS, None, |g, v| {
                let y = g.embedding(v[0], &ids)?;
                weighted_sum(g, y, s)
            })
            .unwrap()
        }),
    ));

    cases.push((
        "segment_mean",
        Box::new(|s| {
            let mut r = SeededRng::new(s, Stream::Init);
            let cut = 1 + r.below(4);
            let segments = [0..cut, cut..5, 2..3];
            let ins = [rand(&[5, 3], -1.0, 1.0, &mut r)];
            check(&ins, EPS, None, |g, v| {
                let y = g.segment_mean(v[0], &segments)?;
                weighted_sum(g, y, s)
            })
            .unwrap()
        }),
    ));

    cases.push((
        "depthwise_conv2d",
        Box::new(|s| {
            let mut r = SeededRng::new(s, Stream::Init);
            let k = if s % 2 == 0 { 3 } else { 1 };
            let c = 1 + r.below(3);
            let ins = [
                rand(&[2, 4, 3, c], -1.0, 1.0, &mut r),
                rand(&[k, k, c], -1.0, 1.0, &mut r),
                rand(&[c], -1.0, 1.0, &mut r),
            ];
            check(&ins, EPS, None, |g, v| {
                let y = g.depthwise_conv2d(v[0], v[1], v[2])?;
                weighted_sum(g, y, s)
            })
            .unwrap()
        }),
    ));

    cases.push((
        "avg_pool2",
        Box::new(|s| {
            let mut r = SeededRng::new(s, Stream::Init);
            let ins = [rand(&[2, 4, 2, 1 + r.below(3)], -1.0, 1.0, &mut r)];
            check(&ins, EPS, None, |g, v| {
                let y = g.avg_pool2(v[0])?;
                weighted_sum(g, y, s)
            })
            .unwrap()
        }),
    ));

    cases.push((
        "global_avg_pool",
        Box::new(|s| {
            let mut r = SeededRng::new(s, Stream::Init);
            let ins = [rand(&[2, 3, 2, 1 + r.below(3)], -1.0, 1.0, &mut r)];
            check(&ins, EPS, None, |g, v| {
                let y = g.global_avg_pool(v[0])?;
                weighted_sum(g, y, s)
            })
            .unwrap()
        }),
    ));

    cases.push((
        "cross_entropy",
        Box::new(|s| {
            let mut r = SeededRng::new(s, Stream::Init);
            let c = 2 + r.below(4);
            let labels: Vec<usize> = (0..4).map(|_| r.below(c)).collect();
            let ins = [rand(&[4, c], -3.0, 3.0, &mut r)];
            check(&ins, EPS, None, |g, v| g.cross_entropy(v[0], &labels)).unwrap()
        }),
    ));
    cases
}

pub fn head_instance(kind: HeadKind, seed: u64) -> GradCheckReport {
    let mut r = SeededRng::new(seed, Stream::Init);
    let l = 1 + r.below(3);
    let dims: Vec<usize> = (0..l).map(|_| 1 + r.below(4)).collect();
    let cfg = HeadConfig {
        kind,
        d_star: 1 + r.below(3),
        tau: r.uniform(0.5, 2.0),
        psi_kind: if seed % 2 == 0 {
            PsiKind::Identity
        } else {
            PsiKind::Mlp
        },
        scorer_width: 1 + r.below(4),
        num_classes: 2 + r.below(3),
    };
    let mut store = ParamStore::new();
    let head = Head::new(cfg.clone(), &dims, &mut store, &mut r).unwrap();
    if let Some(id) = store.id_of("head.mix_logits") {
        // Away from the zero init so the softmax gradient is generic.
        *store.get_mut(id) = rand(&[1, l], -1.0, 1.0, &mut r);
    }
    let n = 3;
    let labels: Vec<usize> = (0..n).map(|_| r.below(cfg.num_classes)).collect();
    let np = store.len();
    let mut inputs: Vec<Tensor> = store.tensors().to_vec();
    for &d in &dims {
        inputs.push(rand(&[n, d], -1.5, 1.5, &mut r));
    }
    check(&inputs, EPS, None, |g, v| {
        let p = Bound::from_vars(v[..np].to_vec());
        let states = LayerStates {
            states: v[np..].to_vec(),
            dims: dims.clone(),
        };
        let out = head.forward(g, &p, &states)?;
        g.cross_entropy(out.logits, &labels)
    })
    .unwrap()
}

/// Worst relative error over `instances` seeds, or the first failing instance.
pub fn worst(
    name: &str,
    make: impl Fn(u64) -> GradCheckReport,
    instances: u64,
) -> std::result::Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let rep = make(seed);
        if rep.coords_checked == 0 {
            return Err(format!("{name}: nothing checked"));
        }
        if rep.max_rel_err > TOL {
            return Err(format!("{name} instance {seed}: {rep:?}"));
        }
        worst = worst.max(rep.max_rel_err);
    }
    Ok(worst)
}
