//! Plain-loop head reference and the structural properties checked by the
//! head tests and the acceptance run.

use laya::autodiff::{Graph, Tensor};
use laya::backbones::LayerStates;
use laya::heads::{count_parameters, Head, HeadConfig, HeadKind, HeadOutput, PsiKind};
use laya::params::ParamStore;
use laya::rng::{SeededRng, Stream};

// ---- plain-loop reference ----

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn dense(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = store.by_name(&format!("{name}.weight")).unwrap();
    let b = store.by_name(&format!("{name}.bias")).unwrap();
    let (fi, fo) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), fi);
    (0..fo)
        .map(|j| b.data()[j] + (0..fi).map(|i| x[i] * w.data()[i * fo + j]).sum::<f64>())
        .collect()
}

pub fn softmax(s: &[f64], tau: f64) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| ((v - m) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub struct RefOut {
    pub logits: Vec<f64>,
    pub alpha: Option<Vec<f64>>,
}

/// One sample through the head, written without the graph.
pub fn reference(cfg: &HeadConfig, store: &ParamStore, h: &[Vec<f64>]) -> RefOut {
    let l = h.len();
    let adapt = || -> Vec<Vec<f64>> {
        (0..l)
            .map(|i| dense(store, &format!("head.adapter{i}"), &h[i]))
            .collect()
    };
    match cfg.kind {
        HeadKind::LastLayer => RefOut {
            logits: dense(store, "head.classifier", &h[l - 1]),
            alpha: None,
        },
        HeadKind::Concat => {
            let cat: Vec<f64> = adapt().concat();
            let hid: Vec<f64> = dense(store, "head.post", &cat)
                .into_iter()
                .map(gelu)
                .collect();
            RefOut {
                logits: dense(store, "head.classifier", &hid),
                alpha: None,
            }
        }
        HeadKind::ScalarMix | HeadKind::Laya => {
            let zs = adapt();
            let alpha = if cfg.kind == HeadKind::ScalarMix {
                softmax(store.by_name("head.mix_logits").unwrap().data(), 1.0)
            } else {
                let us: Vec<Vec<f64>> = match cfg.psi_kind {
                    PsiKind::Identity => zs.clone(),
                    PsiKind::Mlp => zs
                        .iter()
                        .map(|z| {
                            let t: Vec<f64> =
                                dense(store, "head.psi0", z).into_iter().map(gelu).collect();
                            dense(store, "head.psi1", &t)
                        })
                        .collect(),
                };
                let hid: Vec<f64> = dense(store, "head.scorer0", &us.concat())
                    .into_iter()
                    .map(gelu)
                    .collect();
                softmax(&dense(store, "head.scorer1", &hid), cfg.tau)
            };
            let ds = cfg.d_star;
            let agg: Vec<f64> = (0..ds)
                .map(|k| (0..l).map(|i| alpha[i] * zs[i][k]).sum())
                .collect();
            RefOut {
                logits: dense(store, "head.classifier", &agg),
                alpha: Some(alpha),
            }
        }
    }
}

// ---- graph helpers ----

pub struct Run {
    pub logits: Tensor,
    pub alpha: Option<Tensor>,
    pub h_agg: Tensor,
}

pub fn forward(head: &Head, store: &ParamStore, xs: &[Tensor]) -> Run {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let states = LayerStates {
        states: xs.iter().map(|x| g.constant(x.clone())).collect(),
        dims: head.dims().to_vec(),
    };
    let out: HeadOutput = head.forward(&mut g, &p, &states).unwrap();
    Run {
        logits: g.value(out.logits).clone(),
        alpha: out.alpha_rows(&g),
        h_agg: g.value(out.h_agg).clone(),
    }
}

pub fn rand(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect(),
    )
    .unwrap()
}

pub fn states(dims: &[usize], n: usize, rng: &mut SeededRng) -> Vec<Tensor> {
    dims.iter().map(|&d| rand(&[n, d], rng)).collect()
}

pub fn set(store: &mut ParamStore, name: &str, data: Vec<f64>) {
    let id = store
        .id_of(name)
        .unwrap_or_else(|| panic!("no parameter {name}"));
    let t = store.get_mut(id);
    assert_eq!(t.numel(), data.len(), "{name}");
    t.data_mut().copy_from_slice(&data);
}

pub fn build(cfg: &HeadConfig, dims: &[usize], seed: u64) -> (Head, ParamStore) {
    let mut store = ParamStore::new();
    let head = Head::new(
        cfg.clone(),
        dims,
        &mut store,
        &mut SeededRng::new(seed, Stream::Init),
    )
    .unwrap();
    (head, store)
}

pub fn laya(d_star: usize, tau: f64, psi: PsiKind, w: usize, c: usize) -> HeadConfig {
    HeadConfig {
        kind: HeadKind::Laya,
        d_star,
        tau,
        psi_kind: psi,
        scorer_width: w,
        num_classes: c,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---- properties ----

pub type Check = std::result::Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn randomize_mix(store: &mut ParamStore, l: usize, rng: &mut SeededRng) {
    if store.id_of("head.mix_logits").is_some() {
        set(
            store,
            "head.mix_logits",
            (0..l).map(|_| rng.uniform(-2.0, 2.0)).collect(),
        );
    }
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

fn psi(mlp: bool) -> PsiKind {
    if mlp {
        PsiKind::Mlp
    } else {
        PsiKind::Identity
    }
}

/// A head configuration drawn the same way the property tests draw theirs.
pub fn random_case(rng: &mut SeededRng) -> (HeadConfig, Vec<usize>, u64) {
    let kind = HeadKind::ALL[rng.below(HeadKind::ALL.len())];
    let l = 1 + rng.below(4);
    let dims = (0..l).map(|_| 1 + rng.below(5)).collect();
    let cfg = HeadConfig {
        kind,
        d_star: 1 + rng.below(4),
        tau: rng.uniform(0.1, 4.0),
        psi_kind: psi(rng.below(2) == 1),
        scorer_width: 1 + rng.below(5),
        num_classes: 1 + rng.below(4),
    };
    (cfg, dims, rng.below(usize::MAX) as u64)
}

pub fn graph_matches_reference(cfg: &HeadConfig, dims: &[usize], seed: u64) -> Check {
    let (head, mut store) = build(cfg, dims, seed);
    let mut r = SeededRng::new(seed, Stream::Synthetic);
    randomize_mix(&mut store, dims.len(), &mut r);
    let x = states(dims, 4, &mut r);
    let run = forward(&head, &store, &x);
    for i in 0..4 {
        let h: Vec<Vec<f64>> = x.iter().map(|t| t.row(i).to_vec()).collect();
        let want = reference(cfg, &store, &h);
        let d = max_abs_diff(run.logits.row(i), &want.logits);
        ensure!(d <= 1e-10, "logits differ by {d:e}");
        match (&run.alpha, want.alpha) {
            (Some(a), Some(w)) => {
                let d = max_abs_diff(a.row(i), &w);
                ensure!(d <= 1e-12, "attention differs by {d:e}");
            }
            (None, None) => {}
            _ => return Err("attention presence differs".into()),
        }
    }
    Ok(())
}

pub fn attention_on_simplex(cfg: &HeadConfig, dims: &[usize], seed: u64) -> Check {
    let (head, mut store) = build(cfg, dims, seed);
    let mut r = SeededRng::new(seed, Stream::Synthetic);
    randomize_mix(&mut store, dims.len(), &mut r);
    let run = forward(&head, &store, &states(dims, 5, &mut r));
    ensure!(
        run.alpha.is_some() == cfg.kind.emits_attention(),
        "{} attention presence",
        cfg.kind
    );
    if let Some(a) = run.alpha {
        ensure!(
            a.shape() == [5, dims.len()],
            "attention shape {:?}",
            a.shape()
        );
        for i in 0..5 {
            let row = a.row(i);
            ensure!(row.iter().all(|&v| v >= 0.0), "negative weight in {row:?}");
            ensure!(
                (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9,
                "row sums to {}",
                row.iter().sum::<f64>()
            );
        }
    }
    Ok(())
}

pub fn scalar_mix_constant(dims: &[usize], seed: u64) -> Check {
    let mut cfg = HeadConfig::new(HeadKind::ScalarMix, 3);
    cfg.d_star = 3;
    let (head, mut store) = build(&cfg, dims, seed);
    let mut r = SeededRng::new(seed, Stream::Synthetic);
    randomize_mix(&mut store, dims.len(), &mut r);
    let a = forward(&head, &store, &states(dims, 6, &mut r))
        .alpha
        .unwrap();
    for i in 1..6 {
        ensure!(a.row(i) == a.row(0), "row {i} differs from row 0");
    }
    Ok(())
}

pub fn laya_input_dependent(dims: &[usize], seed: u64, mlp: bool) -> Check {
    let (head, store) = build(&laya(4, 1.0, psi(mlp), 8, 3), dims, seed);
    let mut r = SeededRng::new(seed, Stream::Synthetic);
    let a = forward(&head, &store, &states(dims, 8, &mut r))
        .alpha
        .unwrap();
    let mut max_dist: f64 = 0.0;
    for i in 0..8 {
        for j in 0..i {
            max_dist = max_dist.max(max_abs_diff(a.row(i), a.row(j)));
        }
    }
    ensure!(max_dist > 0.0, "attention identical across samples");
    Ok(())
}

/// Swapping layers `i` and `j` together with their adapter and scorer
/// blocks permutes α the same way and leaves h_agg and the logits unchanged.
pub fn permutation_equivariant(dims: &[usize], i: usize, j: usize, seed: u64, mlp: bool) -> Check {
    let l = dims.len();
    let (ds, w) = (3, 5);
    let cfg = laya(ds, 1.3, psi(mlp), w, 4);
    let (head, store) = build(&cfg, dims, seed);
    let mut perm: Vec<usize> = (0..l).collect();
    perm.swap(i, j);
    let pdims: Vec<usize> = perm.iter().map(|&k| dims[k]).collect();
    let (phead, mut pstore) = build(&cfg, &pdims, seed ^ 1);

    for (dst, &src) in perm.iter().enumerate() {
        for part in ["weight", "bias"] {
            let t = store
                .by_name(&format!("head.adapter{src}.{part}"))
                .unwrap()
                .data()
                .to_vec();
            set(&mut pstore, &format!("head.adapter{dst}.{part}"), t);
        }
    }
    let mut shared = vec![
        "head.classifier.weight",
        "head.classifier.bias",
        "head.scorer0.bias",
    ];
    if mlp {
        shared.extend([
            "head.psi0.weight",
            "head.psi0.bias",
            "head.psi1.weight",
            "head.psi1.bias",
        ]);
    }
    for name in shared {
        set(
            &mut pstore,
            name,
            store.by_name(name).unwrap().data().to_vec(),
        );
    }
    // scorer0 input blocks and scorer1 output logits follow the layers.
    let s0 = store.by_name("head.scorer0.weight").unwrap().data();
    let mut s0p = Vec::with_capacity(s0.len());
    for &src in &perm {
        s0p.extend_from_slice(&s0[src * ds * w..(src + 1) * ds * w]);
    }
    set(&mut pstore, "head.scorer0.weight", s0p);
    let s1 = store.by_name("head.scorer1.weight").unwrap().data();
    let s1p: Vec<f64> = (0..w)
        .flat_map(|h| perm.iter().map(move |&src| s1[h * l + src]))
        .collect();
    set(&mut pstore, "head.scorer1.weight", s1p);
    let b1 = store.by_name("head.scorer1.bias").unwrap().data();
    set(
        &mut pstore,
        "head.scorer1.bias",
        perm.iter().map(|&src| b1[src]).collect(),
    );

    let mut r = SeededRng::new(seed, Stream::Synthetic);
    let x = states(dims, 5, &mut r);
    let px: Vec<Tensor> = perm.iter().map(|&k| x[k].clone()).collect();
    let a = forward(&head, &store, &x);
    let b = forward(&phead, &pstore, &px);
    let (aa, ba) = (a.alpha.unwrap(), b.alpha.unwrap());
    for row in 0..5 {
        for (dst, &src) in perm.iter().enumerate() {
            let d = (ba.row(row)[dst] - aa.row(row)[src]).abs();
            ensure!(d <= 1e-12, "permuted attention differs by {d:e}");
        }
    }
    let d = max_abs_diff(a.h_agg.data(), b.h_agg.data());
    ensure!(d <= 1e-12, "h_agg differs by {d:e}");
    let d = max_abs_diff(a.logits.data(), b.logits.data());
    ensure!(d <= 1e-12, "logits differ by {d:e}");
    Ok(())
}

pub fn entropy_monotone_in_tau(s: &[f64]) -> Check {
    let mut g = Graph::new();
    let sv = g.constant(Tensor::new(vec![1, s.len()], s.to_vec()).unwrap());
    let mut prev = f64::NEG_INFINITY;
    for tau in [0.25, 0.5, 1.0, 2.0, 4.0] {
        let a = g.softmax_temperature(sv, tau).unwrap();
        let h = entropy(g.value(a).data());
        ensure!(h >= prev - 1e-12, "tau {tau} entropy {h} < {prev}");
        prev = h;
    }
    Ok(())
}

pub fn low_temperature_sharpens(dims: &[usize], seed: u64) -> Check {
    let (warm, store) = build(&laya(3, 1.0, PsiKind::Identity, 4, 2), dims, seed);
    let (cold, _) = build(&laya(3, 0.05, PsiKind::Identity, 4, 2), dims, seed);
    let mut r = SeededRng::new(seed, Stream::Synthetic);
    let x = states(dims, 6, &mut r);
    let aw = forward(&warm, &store, &x).alpha.unwrap();
    let ac = forward(&cold, &store, &x).alpha.unwrap();
    for i in 0..6 {
        let mw = aw.row(i).iter().cloned().fold(0.0, f64::max);
        let mc = ac.row(i).iter().cloned().fold(0.0, f64::max);
        ensure!(
            mc >= mw - 1e-15,
            "max weight {mc} at tau 0.05 below {mw} at tau 1"
        );
    }
    Ok(())
}

pub fn parameter_count_matches(cfg: &HeadConfig, dims: &[usize], seed: u64) -> Check {
    let (_, store) = build(cfg, dims, seed);
    let n = store.num_scalars();
    let closed = count_parameters(cfg, dims);
    ensure!(
        closed == n,
        "{}: closed form {closed} vs enumerated {n}",
        cfg.kind
    );
    let adapters: usize = dims.iter().map(|d| d * cfg.d_star + cfg.d_star).sum();
    let classifier_in = if cfg.kind == HeadKind::LastLayer {
        *dims.last().unwrap()
    } else {
        cfg.d_star
    };
    let base = classifier_in * cfg.num_classes + cfg.num_classes;
    match cfg.kind {
        HeadKind::LastLayer => ensure!(n == base, "last_layer {n} vs {base}"),
        HeadKind::ScalarMix => ensure!(n == adapters + base + dims.len(), "scalar_mix {n}"),
        _ => ensure!(
            n > adapters + base,
            "{} {n} not above adapters + classifier",
            cfg.kind
        ),
    }
    Ok(())
}

/// With one layer α is identically 1, so LAYA reduces to a LastLayer head
/// (sharing the classifier) applied to the adapter output.
pub fn single_layer_laya_matches_last_layer(seed: u64) -> Check {
    let mut r = SeededRng::new(seed, Stream::Synthetic);
    let (d, ds, c) = (1 + r.below(6), 1 + r.below(4), 2 + r.below(3));
    let cfg = laya(
        ds,
        r.uniform(0.1, 4.0),
        psi(r.below(2) == 1),
        1 + r.below(5),
        c,
    );
    let (head, store) = build(&cfg, &[d], seed);
    let x = states(&[d], 7, &mut r);
    let run = forward(&head, &store, &x);
    ensure!(
        run.alpha.as_ref().unwrap().data().iter().all(|&a| a == 1.0),
        "α is not identically 1"
    );

    let mut g = Graph::new();
    let xv = g.constant(x[0].clone());
    let w = g.constant(store.by_name("head.adapter0.weight").unwrap().clone());
    let b = g.constant(store.by_name("head.adapter0.bias").unwrap().clone());
    let z = g.matmul(xv, w).unwrap();
    let z = g.add_bias(z, b).unwrap();
    let (ll, mut ll_store) = build(&HeadConfig::new(HeadKind::LastLayer, c), &[ds], 0);
    for name in ["head.classifier.weight", "head.classifier.bias"] {
        set(
            &mut ll_store,
            name,
            store.by_name(name).unwrap().data().to_vec(),
        );
    }
    let z = g.value(z).clone();
    let direct = forward(&ll, &ll_store, &[z]);
    let diff = max_abs_diff(run.logits.data(), direct.logits.data());
    ensure!(diff <= 1e-12, "logits differ by {diff:e}");
    Ok(())
}
