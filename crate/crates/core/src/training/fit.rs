use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::metrics::{argmax, Metrics};
use crate::autodiff::{Graph, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{SeededRng, Stream};

/// Rows per forward pass during evaluation.
pub const EVAL_BATCH: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Seeds for grid-search runs, kept apart from the final seeds.
    #[serde(default = "default_grid_seeds")]
    pub grid_seeds: Vec<u64>,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    128
}
fn default_max_epochs() -> usize {
    50
}
fn default_patience() -> usize {
    5
}
fn default_val_fraction() -> f64 {
    0.1
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn default_grid_seeds() -> Vec<u64> {
    vec![1000, 1001, 1002]
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            val_fraction: default_val_fraction(),
            seeds: default_seeds(),
            grid_seeds: default_grid_seeds(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(
                "train.learning_rate",
                "must be a finite value ≥ 0",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be ≥ 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be ≥ 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("train.patience", "must be ≥ 1"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("train.val_fraction", "must lie in (0, 1)"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config(
                "train.seeds",
                "at least one seed is required",
            ));
        }
        Ok(())
    }
}

/// Train / validation indices: the last `⌈val_fraction · n⌉` entries of a
/// seed-shuffled permutation are held out.
pub fn split_train_val(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let perm = SeededRng::new(seed, Stream::Shuffle).permutation(n);
    let n_val = ((val_fraction * n as f64).ceil() as usize).min(n);
    let (train, val) = perm.split_at(n - n_val);
    (train.to_vec(), val.to_vec())
}

/// Outcome of observing one epoch's validation score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Improved,
    Continue,
    Stop,
}

/// Patience-based stopping on strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> Decision {
        if score > self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.stale = 0;
            Decision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                Decision::Stop
            } else {
                Decision::Continue
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopTrace {
    /// 1-based epoch whose state was restored.
    pub best_epoch: usize,
    pub best_score: f64,
    pub epochs_run: usize,
    pub scores: Vec<f64>,
}

/// Runs `epoch` (1-based) until patience runs out or `max_epochs` is hit,
/// then leaves `state` equal to its snapshot after the best epoch.
pub fn run_with_early_stopping<S: Clone>(
    state: &mut S,
    max_epochs: usize,
    patience: usize,
    mut epoch: impl FnMut(&mut S, usize) -> Result<f64>,
) -> Result<StopTrace> {
    let mut stopper = EarlyStopper::new(patience);
    let mut best_state = state.clone();
    let mut scores = Vec::new();
    for e in 1..=max_epochs {
        let score = epoch(state, e)?;
        scores.push(score);
        match stopper.observe(e, score) {
            Decision::Improved => best_state = state.clone(),
            Decision::Continue => {}
            Decision::Stop => break,
        }
    }
    *state = best_state;
    Ok(StopTrace {
        best_epoch: stopper.best_epoch(),
        best_score: stopper.best(),
        epochs_run: scores.len(),
        scores,
    })
}

/// Test-time outputs of a model over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub preds: Vec<usize>,
    /// `[n × L]` attention weights for heads that emit them.
    pub alpha: Option<Tensor>,
}

pub fn predict(model: &Model, data: &Dataset) -> Result<Predictions> {
    let mut preds = Vec::with_capacity(data.len());
    let mut alpha: Option<Vec<f64>> = None;
    let mut width = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = data.gather(chunk);
        let mut g = Graph::new();
        let (_, fp) = model.forward(&mut g, &batch.inputs, false)?;
        let logits = g.value(fp.head.logits);
        preds.extend((0..logits.rows()).map(|r| argmax(logits.row(r))));
        if let Some(a) = fp.head.alpha_rows(&g) {
            width = a.last_dim();
            alpha
                .get_or_insert_with(Vec::new)
                .extend_from_slice(a.data());
        }
    }
    let alpha = match alpha {
        Some(a) => Some(Tensor::new(vec![preds.len(), width], a)?),
        None => None,
    };
    Ok(Predictions { preds, alpha })
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let p = predict(model, data)?;
    Metrics::from_predictions(&data.labels, &p.preds, data.num_classes)
}

/// Mean cross-entropy of one mini-batch, updating the parameters once.
pub fn train_step(
    model: &mut Model,
    data: &Dataset,
    idx: &[usize],
    adam: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<f64> {
    let batch = data.gather(idx);
    let mut g = Graph::new();
    let (p, fp) = model.forward(&mut g, &batch.inputs, true)?;
    let loss = g.cross_entropy(fp.head.logits, &batch.labels)?;
    let value = g.value(loss).data()[0];
    let vars = p.vars().to_vec();
    let mut grads = g.backward(loss)?;
    let grads: Vec<Tensor> = vars
        .iter()
        .zip(model.params.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    adam_step(
        model.params.tensors_mut(),
        &grads,
        adam,
        cfg.learning_rate,
        &cfg.adam,
    )?;
    Ok(value)
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub trace: StopTrace,
    /// Mean training loss of every epoch that ran.
    pub train_loss: Vec<f64>,
    pub wall_clock_seconds: f64,
}

/// Trains with early stopping on validation accuracy; `model` ends with the
/// best epoch's parameters. Without an explicit `val` set the last
/// `⌈val_fraction · n⌉` rows of a seeded permutation of `data` are held out.
pub fn fit(
    model: &mut Model,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let start = Instant::now();
    let (train_idx, held_out) = match val {
        Some(v) => ((0..data.len()).collect(), v.clone()),
        None => {
            let (tr, va) = split_train_val(data.len(), cfg.val_fraction, seed);
            (tr, data.subset(&va))
        }
    };
    if train_idx.is_empty() {
        return Err(Error::Data(format!(
            "no training rows left after holding out {} for validation",
            held_out.len()
        )));
    }
    if held_out.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let mut order_rng = SeededRng::new(seed, Stream::BatchOrder);
    let mut adam = AdamState::new(model.params.tensors());
    let mut train_loss = Vec::new();

    let mut state = model.clone();
    let trace = run_with_early_stopping(&mut state, cfg.max_epochs, cfg.patience, |m, _epoch| {
        let order = order_rng.permutation(train_idx.len());
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let idx: Vec<usize> = chunk.iter().map(|&k| train_idx[k]).collect();
            total += train_step(m, data, &idx, &mut adam, cfg)?;
            batches += 1;
        }
        train_loss.push(total / batches as f64);
        Ok(evaluate(m, &held_out)?.accuracy)
    })?;
    *model = state;
    Ok(FitOutcome {
        trace,
        train_loss,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}
