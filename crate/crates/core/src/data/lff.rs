//! Layer-feature files: per-sample labels plus one feature vector per layer.
//!
//! Little-endian layout: `"LAYAFF01"`, `u32 n`, `u32 L`, `L × u32 dims`,
//! `u32 num_classes`, then per sample a `u32` label followed by `Σ dims`
//! `f32` values in layer order.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Inputs, Split};
use crate::binio::LeReader;
use crate::error::{Error, Result};
use crate::rng::{SeededRng, Stream};

pub const LFF_MAGIC: &[u8; 8] = b"LAYAFF01";

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenFeatureSet {
    pub dims: Vec<usize>,
    pub num_classes: usize,
    pub labels: Vec<usize>,
    /// `features[i]` is `n × dims[i]`, row-major.
    pub features: Vec<Vec<f64>>,
}

impl FrozenFeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len()
    }

    pub fn read_from(r: impl Read, what: &'static str) -> Result<Self> {
        let mut r = LeReader::new(r, what);
        let mut magic = [0u8; 8];
        r.bytes(&mut magic, "magic")?;
        if &magic != LFF_MAGIC {
            return Err(Error::format(
                what,
                "field `magic`: not a LAYAFF01 file (offset 0)",
            ));
        }
        let n = r.u32("n_samples")? as usize;
        let l = r.u32("num_layers")? as usize;
        if l == 0 {
            return Err(r.err("field `num_layers`: must be ≥ 1"));
        }
        let mut dims = Vec::with_capacity(l);
        for i in 0..l {
            let d = r.u32("dims")? as usize;
            if d == 0 {
                return Err(r.err(format!("field `dims[{i}]`: must be ≥ 1")));
            }
            dims.push(d);
        }
        let num_classes = r.u32("num_classes")? as usize;
        if num_classes == 0 && n > 0 {
            return Err(r.err("field `num_classes`: must be ≥ 1"));
        }
        let mut labels = Vec::with_capacity(n);
        let mut features: Vec<Vec<f64>> = dims.iter().map(|d| Vec::with_capacity(n * d)).collect();
        for s in 0..n {
            let y = r.u32("label")? as usize;
            if y >= num_classes {
                return Err(r.err(format!(
                    "field `label`: sample {s} has label {y} outside [0, {num_classes})"
                )));
            }
            labels.push(y);
            for (f, &d) in features.iter_mut().zip(&dims) {
                r.f32s(f, d, "features")?;
            }
        }
        if !r.at_eof() {
            return Err(r.err(format!(
                "field `n_samples`: data continues past {n} samples"
            )));
        }
        Ok(FrozenFeatureSet {
            dims,
            num_classes,
            labels,
            features,
        })
    }

    /// Features are narrowed to `f32`.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(LFF_MAGIC)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&(self.num_classes as u32).to_le_bytes())?;
        for s in 0..self.len() {
            w.write_all(&(self.labels[s] as u32).to_le_bytes())?;
            for (f, &d) in self.features.iter().zip(&self.dims) {
                for &x in &f[s * d..(s + 1) * d] {
                    w.write_all(&(x as f32).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f), "LFF file").map_err(|e| match e {
            Error::Format { msg, .. } => Error::format(path.display().to_string(), msg),
            e => e,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_dataset(&self, split: Split) -> Result<Dataset> {
        Dataset::new(
            Inputs::Layers {
                dims: self.dims.clone(),
                data: self.features.clone(),
            },
            self.labels.clone(),
            self.num_classes.max(1),
            split,
        )
    }
}

/// Sample indices of each partition of a feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitManifest {
    /// Per class, the first `⌊0.8 n_c⌉` of a seeded shuffle go to train, the
    /// next `⌊0.1 n_c⌉` to val, the rest to test.
    pub fn stratified(labels: &[usize], num_classes: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed, Stream::Shuffle);
        let mut m = SplitManifest {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for c in 0..num_classes {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            let perm = rng.permutation(members.len());
            let n = members.len();
            let n_train = (0.8 * n as f64).round() as usize;
            let n_val = ((0.1 * n as f64).round() as usize).min(n - n_train);
            for (k, &p) in perm.iter().enumerate() {
                let idx = members[p];
                if k < n_train {
                    m.train.push(idx);
                } else if k < n_train + n_val {
                    m.val.push(idx);
                } else {
                    m.test.push(idx);
                }
            }
        }
        m.train.sort_unstable();
        m.val.sort_unstable();
        m.test.sort_unstable();
        m
    }

    /// Partitions must be disjoint and index into `n` samples.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (name, part) in [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            for &i in part {
                if i >= n {
                    return Err(Error::format(
                        "split manifest",
                        format!("field `{name}`: index {i} outside [0, {n})"),
                    ));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::format(
                        "split manifest",
                        format!("field `{name}`: index {i} appears in more than one partition"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Recipe for a feature file in which one layer carries all the signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub dims: Vec<usize>,
    /// 1-based index of the layer whose features depend on the label.
    pub informative_layer: usize,
    pub num_classes: usize,
    /// Distance between class means in units of the noise std.
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_separation() -> f64 {
    5.0
}

/// Balanced labels; the informative layer is `μ_y + N(0, I)` with class means
/// `separation` apart, every other layer is `N(0, I)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FrozenFeatureSet> {
    let l = spec.dims.len();
    if l == 0 || spec.dims.contains(&0) {
        return Err(Error::config(
            "synthetic.dims",
            "need at least one positive layer width",
        ));
    }
    if spec.informative_layer == 0 || spec.informative_layer > l {
        return Err(Error::config(
            "synthetic.informative_layer",
            format!("must lie in 1..={l}"),
        ));
    }
    if spec.num_classes == 0 {
        return Err(Error::config("synthetic.num_classes", "must be ≥ 1"));
    }
    let mut rng = SeededRng::new(spec.seed, Stream::Synthetic);
    let k = spec.informative_layer - 1;
    let dk = spec.dims[k];
    let c = spec.num_classes;
    // One-hot means scaled so every pair is `separation` apart; random
    // directions when the layer is narrower than the class count.
    let means: Vec<Vec<f64>> = (0..c)
        .map(|j| {
            if c <= dk {
                let mut m = vec![0.0; dk];
                m[j] = spec.separation / 2f64.sqrt();
                m
            } else {
                (0..dk).map(|_| rng.normal() * spec.separation).collect()
            }
        })
        .collect();
    let order = rng.permutation(spec.n);
    let labels: Vec<usize> = order.iter().map(|&i| i % c).collect();
    let mut features: Vec<Vec<f64>> = spec
        .dims
        .iter()
        .map(|&d| Vec::with_capacity(spec.n * d))
        .collect();
    for &y in &labels {
        for (i, &d) in spec.dims.iter().enumerate() {
            for j in 0..d {
                let noise = rng.normal();
                let v = if i == k { means[y][j] + noise } else { noise };
                features[i].push(v as f32 as f64);
            }
        }
    }
    Ok(FrozenFeatureSet {
        dims: spec.dims.clone(),
        num_classes: c,
        labels,
        features,
    })
}

pub fn generate_synthetic_lff(spec: &SyntheticSpec, path: &Path) -> Result<FrozenFeatureSet> {
    let set = generate_synthetic(spec)?;
    set.save(path)?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, c: usize) -> SyntheticSpec {
        SyntheticSpec {
            n,
            dims: vec![4, 4, 4],
            informative_layer: 2,
            num_classes: c,
            separation: 5.0,
            seed: 11,
        }
    }

    fn bytes(set: &FrozenFeatureSet) -> Vec<u8> {
        let mut b = Vec::new();
        set.write_to(&mut b).unwrap();
        b
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let set = generate_synthetic(&spec(10, 3)).unwrap();
        let b = bytes(&set);
        assert_eq!(b.len(), 8 + 4 + 4 + 12 + 4 + 10 * (4 + 12 * 4));
        assert_eq!(
            FrozenFeatureSet::read_from(b.as_slice(), "mem").unwrap(),
            set
        );
    }

    #[test]
    fn empty_set_is_valid() {
        let set = FrozenFeatureSet {
            dims: vec![2],
            num_classes: 2,
            labels: vec![],
            features: vec![vec![]],
        };
        let back = FrozenFeatureSet::read_from(bytes(&set).as_slice(), "mem").unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn zero_dim_and_bad_magic_are_format_errors() {
        let set = generate_synthetic(&spec(2, 2)).unwrap();
        let mut b = bytes(&set);
        b[16..20].copy_from_slice(&0u32.to_le_bytes());
        let err = FrozenFeatureSet::read_from(b.as_slice(), "mem").unwrap_err();
        assert!(
            matches!(err, Error::Format { .. }) && err.to_string().contains("dims[0]"),
            "{err}"
        );
        let mut b = bytes(&set);
        b[0] = b'X';
        assert!(FrozenFeatureSet::read_from(b.as_slice(), "mem")
            .unwrap_err()
            .to_string()
            .contains("magic"));
        let mut b = bytes(&set);
        b.pop();
        assert!(matches!(
            FrozenFeatureSet::read_from(b.as_slice(), "mem"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = bytes(&generate_synthetic(&spec(30, 3)).unwrap());
        assert_eq!(a, bytes(&generate_synthetic(&spec(30, 3)).unwrap()));
        let set = generate_synthetic(&spec(30, 3)).unwrap();
        for c in 0..3 {
            assert_eq!(set.labels.iter().filter(|&&y| y == c).count(), 10);
        }
        let one = generate_synthetic(&spec(7, 1)).unwrap();
        assert!(one.labels.iter().all(|&y| y == 0));
    }

    #[test]
    fn stratified_manifest_partitions_everything() {
        let labels: Vec<usize> = (0..53).map(|i| i % 3).collect();
        let m = SplitManifest::stratified(&labels, 3, 0);
        m.validate(53).unwrap();
        assert_eq!(m.train.len() + m.val.len() + m.test.len(), 53);
        for c in 0..3 {
            let n_c = labels.iter().filter(|&&y| y == c).count() as f64;
            let tr = m.train.iter().filter(|&&i| labels[i] == c).count() as f64;
            assert!((tr - 0.8 * n_c).abs() <= 1.0);
        }
        let bad = SplitManifest {
            train: vec![0, 1],
            val: vec![1],
            test: vec![],
        };
        assert!(bad.validate(2).is_err());
    }
}
