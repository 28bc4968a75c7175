//! Run configuration files and dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use laya::backbones::BackboneConfig;
use laya::data::cifar::load_cifar10;
use laya::data::idx::load_fashion_mnist;
use laya::data::text::{load_reviews, Vocabulary};
use laya::data::{Dataset, FrozenFeatureSet, Split, SplitManifest};
use laya::heads::HeadConfig;
use laya::report::{config_hash, to_value};
use laya::training::{GridSpace, TrainConfig};
use laya::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Directory holding the four IDX files, optionally gzipped.
    FashionMnist { path: PathBuf },
    /// Directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar10 { path: PathBuf },
    /// `aclImdb`-style directory with `{train,test}/{neg,pos}/*.txt`.
    Reviews { path: PathBuf },
    /// Pre-extracted layer features. Without a manifest the samples are
    /// split 80/10/10 per class using `split_seed`.
    Lff {
        path: PathBuf,
        #[serde(default)]
        split_manifest: Option<PathBuf>,
        #[serde(default)]
        split_seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    /// Defaults by dataset kind: mlp, cnn, text; derived from the file for LFF.
    #[serde(default)]
    pub backbone: Option<BackboneConfig>,
    pub head: HeadConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub grid: Option<GridSpace>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn parse_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

/// Sets `key.path=value` in `root`. Every segment must already exist.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override {assignment:?} is not key=value")))?;
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Usage(format!("unknown override key `{key}`")))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Usage(format!("unknown override key `{key}`")))?;
        if i + 1 == parts.len() {
            *slot = parse_value(raw);
            return Ok(());
        }
        node = slot;
    }
    Err(Error::Usage(format!(
        "empty override key in {assignment:?}"
    )))
}

/// 3e-4 for the CNN backbone, 1e-3 for the others.
fn default_learning_rate(raw: &Value) -> f64 {
    let cnn = match raw.pointer("/backbone/kind") {
        Some(k) => k == "cnn",
        None => raw.pointer("/dataset/kind").is_some_and(|k| k == "cifar10"),
    };
    if cnn {
        3e-4
    } else {
        1e-3
    }
}

/// Fills `train.learning_rate` from the backbone when the file leaves it out.
fn fill_learning_rate(raw: &mut Value) {
    let lr = default_learning_rate(raw);
    let Some(obj) = raw.as_object_mut() else {
        return;
    };
    let train = obj
        .entry("train")
        .or_insert_with(|| Value::Object(Default::default()));
    if let Some(t) = train.as_object_mut() {
        t.entry("learning_rate").or_insert(Value::from(lr));
    }
}

fn config_error(e: serde_json::Error, what: &str) -> Error {
    Error::config(what, e.to_string())
}

impl RunConfig {
    pub fn from_value(v: Value) -> Result<Self> {
        serde_json::from_value(v).map_err(|e| config_error(e, "config"))
    }

    /// Parses `text`, applies overrides, and resolves relative dataset paths
    /// against `base`.
    pub fn parse(text: &str, overrides: &[String], base: Option<&Path>) -> Result<Self> {
        let raw: Value = serde_json::from_str(text).map_err(|e| config_error(e, "config"))?;
        Self::parse_value(raw, overrides, base)
    }

    fn parse_value(mut raw: Value, overrides: &[String], base: Option<&Path>) -> Result<Self> {
        fill_learning_rate(&mut raw);
        let mut cfg = Self::from_value(raw)?;
        if !overrides.is_empty() {
            // Overrides may only touch keys the fully defaulted config has.
            let mut full = to_value(&cfg);
            for o in overrides {
                apply_override(&mut full, o)?;
            }
            cfg = Self::from_value(full)?;
        }
        if let Some(base) = base {
            cfg.dataset.rebase(base);
        }
        cfg.train.validate()?;
        cfg.head.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides, path.parent())
    }

    /// Loads a config for head-only training on `lff`. The file's dataset
    /// section may be absent; only its `split_seed` is kept.
    pub fn load_frozen(
        path: &Path,
        overrides: &[String],
        lff: &Path,
        manifest: Option<&Path>,
    ) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut raw: Value = serde_json::from_str(&text).map_err(|e| config_error(e, "config"))?;
        let obj = raw
            .as_object_mut()
            .ok_or_else(|| Error::config("config", "top level must be an object"))?;
        let split_seed = obj
            .get("dataset")
            .filter(|d| d.get("kind").is_some_and(|k| k == "lff"))
            .and_then(|d| d.get("split_seed").cloned())
            .unwrap_or(Value::from(0));
        let abs = |p: &Path| std::path::absolute(p).map_err(|e| Error::io(p, e));
        let mut ds =
            serde_json::json!({"kind": "lff", "path": abs(lff)?, "split_seed": split_seed});
        if let Some(m) = manifest {
            ds["split_manifest"] = serde_json::to_value(abs(m)?).expect("path serialises");
        }
        obj.insert("dataset".into(), ds);
        Self::parse_value(raw, overrides, path.parent())
    }

    /// The config as echoed and hashed: output location excluded.
    pub fn echo(&self) -> Value {
        let mut c = self.clone();
        c.out = None;
        to_value(&c)
    }

    pub fn hash(&self) -> String {
        config_hash(&self.echo())
    }
}

impl DatasetConfig {
    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                let joined = base.join(&*p);
                *p = std::path::absolute(&joined).unwrap_or(joined);
            }
        };
        match self {
            DatasetConfig::FashionMnist { path }
            | DatasetConfig::Cifar10 { path }
            | DatasetConfig::Reviews { path } => fix(path),
            DatasetConfig::Lff {
                path,
                split_manifest,
                ..
            } => {
                fix(path);
                if let Some(m) = split_manifest {
                    fix(m);
                }
            }
        }
    }

    fn path(&self) -> &Path {
        match self {
            DatasetConfig::FashionMnist { path }
            | DatasetConfig::Cifar10 { path }
            | DatasetConfig::Reviews { path }
            | DatasetConfig::Lff { path, .. } => path,
        }
    }
}

/// Datasets plus the backbone they imply.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
    pub backbone: BackboneConfig,
    pub vocab: Option<Vocabulary>,
}

/// Loads the dataset and fills in `cfg.backbone`, checking it against the data.
pub fn load_data(cfg: &mut RunConfig) -> Result<LoadedData> {
    let path = cfg.dataset.path().to_path_buf();
    if !path.exists() {
        return Err(Error::config(
            "dataset.path",
            format!("{} does not exist", path.display()),
        ));
    }
    let mut vocab = None;
    let mut val = None;
    let (train, test, default_bb) = match &cfg.dataset {
        DatasetConfig::FashionMnist { .. } => {
            let (tr, te) = load_fashion_mnist(&path)?;
            (tr, te, BackboneConfig::mlp())
        }
        DatasetConfig::Cifar10 { .. } => {
            let (tr, te) = load_cifar10(&path)?;
            (tr, te, BackboneConfig::cnn())
        }
        DatasetConfig::Reviews { .. } => {
            let bb = cfg
                .backbone
                .clone()
                .unwrap_or_else(|| BackboneConfig::text(20_000));
            let BackboneConfig::Text {
                vocab_size,
                seq_len,
                ..
            } = bb
            else {
                return Err(Error::config(
                    "backbone.kind",
                    "reviews need the text backbone",
                ));
            };
            let (tr, te, v) = load_reviews(&path, vocab_size, seq_len)?;
            vocab = Some(v);
            (tr, te, bb)
        }
        DatasetConfig::Lff {
            split_manifest,
            split_seed,
            ..
        } => {
            let set = FrozenFeatureSet::load(&path)?;
            if set.is_empty() {
                return Err(Error::Data(format!("{} holds no samples", path.display())));
            }
            let manifest = match split_manifest {
                Some(m) => SplitManifest::load(m)?,
                None => SplitManifest::stratified(&set.labels, set.num_classes, *split_seed),
            };
            manifest.validate(set.len())?;
            let all = set.to_dataset(Split::Train)?;
            let mut test = all.subset(&manifest.test);
            test.split = Split::Test;
            if manifest.val.is_empty() || manifest.train.is_empty() || manifest.test.is_empty() {
                return Err(Error::Data(
                    "split manifest leaves train, val, or test empty".into(),
                ));
            }
            val = Some(all.subset(&manifest.val));
            (
                all.subset(&manifest.train),
                test,
                BackboneConfig::Frozen {
                    dims: set.dims.clone(),
                },
            )
        }
    };
    let backbone = match (&cfg.backbone, &cfg.dataset) {
        (Some(b), DatasetConfig::Lff { .. }) if *b != default_bb => {
            return Err(Error::config(
                "backbone",
                format!(
                    "feature file has layer dims {:?}; configured backbone expects {:?}",
                    default_bb.dims(),
                    b.dims()
                ),
            ))
        }
        (Some(b), _) => b.clone(),
        (None, _) => default_bb,
    };
    backbone.validate()?;
    if cfg.head.num_classes != train.num_classes {
        return Err(Error::config(
            "head.num_classes",
            format!(
                "dataset has {} classes, head is configured for {}",
                train.num_classes, cfg.head.num_classes
            ),
        ));
    }
    cfg.backbone = Some(backbone.clone());
    Ok(LoadedData {
        train,
        val,
        test,
        backbone,
        vocab,
    })
}
