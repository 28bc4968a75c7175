//! Head-only training on synthetic layer features with one informative layer.

use std::time::Instant;

use laya::backbones::BackboneConfig;
use laya::data::{
    generate_synthetic, generate_synthetic_lff, Dataset, FrozenFeatureSet, Inputs, Split,
    SplitManifest, SyntheticSpec,
};
use laya::heads::{HeadConfig, HeadKind};
use laya::model::ModelSpec;
use laya::training::{evaluate, fit, multi_seed_run, Parallelism, Splits, TrainConfig};

fn single_layer(set: &FrozenFeatureSet, layer: usize, idx: &[usize]) -> Dataset {
    let d = set.dims[layer];
    let data = idx
        .iter()
        .flat_map(|&i| set.features[layer][i * d..(i + 1) * d].iter().copied())
        .collect();
    let labels = idx.iter().map(|&i| set.labels[i]).collect();
    Dataset::new(
        Inputs::Layers {
            dims: vec![d],
            data: vec![data],
        },
        labels,
        set.num_classes,
        Split::Train,
    )
    .unwrap()
}

#[test]
fn linear_probe_separates_only_the_informative_layer() {
    let set = generate_synthetic(&SyntheticSpec {
        n: 1200,
        dims: vec![8, 8, 8],
        informative_layer: 1,
        num_classes: 2,
        separation: 5.0,
        seed: 3,
    })
    .unwrap();
    let m = SplitManifest::stratified(&set.labels, 2, 3);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 32,
        max_epochs: 20,
        patience: 5,
        ..TrainConfig::default()
    };
    let probe = |layer: usize| {
        let (tr, va, te) = (
            single_layer(&set, layer, &m.train),
            single_layer(&set, layer, &m.val),
            single_layer(&set, layer, &m.test),
        );
        let spec = ModelSpec::new(
            BackboneConfig::Frozen { dims: vec![8] },
            HeadConfig::new(HeadKind::LastLayer, 2),
        );
        let mut model = spec.build(0).unwrap();
        fit(&mut model, &tr, Some(&va), &cfg, 0).unwrap();
        evaluate(&model, &te).unwrap().accuracy
    };
    let informative = probe(0);
    assert!(informative >= 0.99, "informative layer probe {informative}");
    for noise in [1, 2] {
        let acc = probe(noise);
        assert!(
            (0.35..=0.65).contains(&acc),
            "noise layer {} probe {acc}",
            noise + 1
        );
    }
}

#[test]
fn laya_head_finds_the_informative_layer() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synthetic.lff");
    let set = generate_synthetic_lff(
        &SyntheticSpec {
            n: 3000,
            dims: vec![16, 16, 16, 16],
            informative_layer: 3,
            num_classes: 4,
            separation: 5.0,
            seed: 11,
        },
        &path,
    )
    .unwrap();
    assert_eq!(FrozenFeatureSet::load(&path).unwrap(), set);
    let m = SplitManifest::stratified(&set.labels, 4, 0);
    let all = set.to_dataset(Split::Train).unwrap();
    let (train, val, test) = (
        all.subset(&m.train),
        all.subset(&m.val),
        all.subset(&m.test),
    );
    let spec = ModelSpec::new(
        BackboneConfig::Frozen {
            dims: set.dims.clone(),
        },
        HeadConfig::new(HeadKind::Laya, 4),
    );
    let cfg = TrainConfig {
        seeds: vec![0, 1, 2],
        ..TrainConfig::default()
    };
    let run = multi_seed_run(
        &spec,
        &Splits::with_val(&train, &val, &test),
        &cfg,
        Parallelism::Sequential,
    )
    .unwrap();
    for o in &run.outcomes {
        assert!(
            o.test.accuracy >= 0.95,
            "seed {} accuracy {}",
            o.seed,
            o.test.accuracy
        );
        let a = o.test_predictions.alpha.as_ref().unwrap();
        let mean: Vec<f64> = (0..4)
            .map(|i| (0..a.rows()).map(|r| a.row(r)[i]).sum::<f64>() / a.rows() as f64)
            .collect();
        for i in [0, 1, 3] {
            assert!(mean[2] > mean[i], "seed {} mean attention {mean:?}", o.seed);
        }
    }
    println!("frozen oracle took {:.1}s", start.elapsed().as_secs_f64());
}
