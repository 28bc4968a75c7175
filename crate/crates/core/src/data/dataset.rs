use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-oriented sample storage shared by datasets and mini-batches.
#[derive(Debug, Clone, PartialEq)]
pub enum Inputs {
    /// Flattened feature rows (images are stored H×W×C, channel last).
    Dense { width: usize, data: Vec<f64> },
    /// Token ids, `seq_len` per row, padded with 0.
    Tokens { seq_len: usize, ids: Vec<u32> },
    /// Pre-extracted per-layer features; `data[i]` is `n × dims[i]`.
    Layers {
        dims: Vec<usize>,
        data: Vec<Vec<f64>>,
    },
}

impl Inputs {
    pub fn len(&self) -> usize {
        match self {
            Inputs::Dense { width, data } => data.len() / (*width).max(1),
            Inputs::Tokens { seq_len, ids } => ids.len() / (*seq_len).max(1),
            Inputs::Layers { dims, data } => match (dims.first(), data.first()) {
                (Some(d), Some(x)) => x.len() / (*d).max(1),
                _ => 0,
            },
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, idx: &[usize]) -> Inputs {
        fn rows<T: Copy>(src: &[T], w: usize, idx: &[usize]) -> Vec<T> {
            let mut out = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                out.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
            out
        }
        match self {
            Inputs::Dense { width, data } => Inputs::Dense {
                width: *width,
                data: rows(data, *width, idx),
            },
            Inputs::Tokens { seq_len, ids } => Inputs::Tokens {
                seq_len: *seq_len,
                ids: rows(ids, *seq_len, idx),
            },
            Inputs::Layers { dims, data } => Inputs::Layers {
                dims: dims.clone(),
                data: data
                    .iter()
                    .zip(dims)
                    .map(|(x, &d)| rows(x, d, idx))
                    .collect(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// How raw values were mapped to model inputs. Statistics always come from
/// the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalization {
    None,
    /// Bytes divided by 255.
    UnitScale,
    /// Per-channel `(x / 255 - mean) / std`.
    ChannelStandardize {
        mean: Vec<f64>,
        std: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Inputs,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Inputs,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        inputs: Inputs,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            split,
            normalization: Normalization::None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.gather(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Copy restricted to the given rows, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let b = self.gather(idx);
        Dataset {
            inputs: b.inputs,
            labels: b.labels,
            num_classes: self.num_classes,
            split: self.split,
            normalization: self.normalization.clone(),
        }
    }
}
