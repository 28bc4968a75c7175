//! A generated review corpus laid out like `aclImdb`, with class cue words.

use std::path::Path;

use laya::backbones::BackboneConfig;
use laya::data::text::load_reviews;
use laya::heads::{HeadConfig, HeadKind};
use laya::model::ModelSpec;
use laya::rng::{SeededRng, Stream};
use laya::training::{multi_seed_run, Parallelism, Splits, TrainConfig};

const POSITIVE: [&str; 6] = [
    "great",
    "wonderful",
    "moving",
    "superb",
    "charming",
    "brilliant",
];
const NEGATIVE: [&str; 6] = ["awful", "boring", "dull", "clumsy", "tedious", "terrible"];
const FILLER: [&str; 12] = [
    "the", "film", "a", "plot", "actor", "scene", "was", "and", "story", "it", "of", "director",
];

pub const VOCAB: usize = 64;
pub const SEQ_LEN: usize = 24;

fn review(label: usize, r: &mut SeededRng) -> String {
    let cues = if label == 1 { &POSITIVE } else { &NEGATIVE };
    let mut words: Vec<&str> = (0..12).map(|_| FILLER[r.below(FILLER.len())]).collect();
    for _ in 0..2 {
        let at = r.below(words.len());
        words.insert(at, cues[r.below(cues.len())]);
    }
    // Occasional cue from the other side keeps the task from being trivial.
    if r.next_f64() < 0.3 {
        let other = if label == 1 { &NEGATIVE } else { &POSITIVE };
        words.push(other[r.below(other.len())]);
    }
    words.join(" ")
}

fn write_split(root: &Path, split: &str, per_class: usize, r: &mut SeededRng) {
    for (label, sub) in ["neg", "pos"].iter().enumerate() {
        let dir = root.join(split).join(sub);
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..per_class {
            std::fs::write(dir.join(format!("{i:04}_1.txt")), review(label, r)).unwrap();
        }
    }
}

/// 200 train and 100 test reviews per class.
pub fn write_corpus(root: &Path) {
    let mut r = SeededRng::new(0, Stream::Synthetic);
    write_split(root, "train", 200, &mut r);
    write_split(root, "test", 100, &mut r);
}

/// Test accuracy of a small text backbone with a LAYA head on `root`.
pub fn sanity_accuracy(root: &Path) -> f64 {
    let bb = BackboneConfig::Text {
        vocab_size: VOCAB,
        embed_dim: 16,
        widths: vec![16, 16],
        seq_len: SEQ_LEN,
    };
    let (train, test, _) = load_reviews(root, VOCAB, SEQ_LEN).unwrap();
    let spec = ModelSpec::new(bb, HeadConfig::new(HeadKind::Laya, 2));
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 32,
        max_epochs: 15,
        seeds: vec![0],
        ..TrainConfig::default()
    };
    let run = multi_seed_run(
        &spec,
        &Splits::new(&train, &test),
        &cfg,
        Parallelism::Sequential,
    )
    .unwrap();
    run.report.accuracy.mean
}
