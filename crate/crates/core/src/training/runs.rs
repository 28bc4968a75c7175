use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::fit::{fit, predict, Predictions, StopTrace, TrainConfig};
use super::metrics::Metrics;
use super::stats::Summary;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadKind, PsiKind};
use crate::model::ModelSpec;
use crate::params::ParamStore;

/// How many independent runs may execute at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    Threads(usize),
}

impl Parallelism {
    pub fn threads(n: usize) -> Self {
        if n <= 1 {
            Parallelism::Sequential
        } else {
            Parallelism::Threads(n)
        }
    }
}

/// Applies `job` to every item, in parallel when enabled; output order
/// always follows input order.
pub fn run_jobs<T, R, F>(items: &[T], par: Parallelism, job: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match par {
        Parallelism::Sequential => items.iter().map(job).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Threads(n) => {
            use rayon::prelude::*;
            match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                Ok(pool) => pool.install(|| items.par_iter().map(&job).collect()),
                Err(_) => items.iter().map(job).collect(),
            }
        }
        #[cfg(not(feature = "parallel"))]
        Parallelism::Threads(_) => items.iter().map(job).collect(),
    }
}

/// Everything one seed's run produced.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub test: Metrics,
    pub trace: StopTrace,
    pub train_loss: Vec<f64>,
    pub test_predictions: Predictions,
    pub params: ParamStore,
    pub wall_clock_seconds: f64,
}

/// Data for a run. Without `val`, validation rows are carved out of `train`
/// per seed.
#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a Dataset,
    pub val: Option<&'a Dataset>,
    pub test: &'a Dataset,
}

impl<'a> Splits<'a> {
    pub fn new(train: &'a Dataset, test: &'a Dataset) -> Self {
        Splits {
            train,
            val: None,
            test,
        }
    }

    pub fn with_val(train: &'a Dataset, val: &'a Dataset, test: &'a Dataset) -> Self {
        Splits {
            train,
            val: Some(val),
            test,
        }
    }
}

/// Fits a fresh model for `seed` and scores it on `test`.
pub fn run_seed(
    spec: &ModelSpec,
    data: &Splits<'_>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<SeedOutcome> {
    let test = data.test;
    let mut model = spec.build(seed)?;
    let outcome = fit(&mut model, data.train, data.val, cfg, seed)?;
    let start = Instant::now();
    if test.is_empty() {
        return Err(Error::Data("test set is empty".into()));
    }
    let preds = predict(&model, test)?;
    let metrics = Metrics::from_predictions(&test.labels, &preds.preds, test.num_classes)?;
    Ok(SeedOutcome {
        seed,
        test: metrics,
        trace: outcome.trace,
        train_loss: outcome.train_loss,
        test_predictions: preds,
        params: model.params,
        wall_clock_seconds: outcome.wall_clock_seconds + start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub test: Metrics,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_accuracy: f64,
    pub val_accuracy_curve: Vec<f64>,
    pub train_loss_curve: Vec<f64>,
    pub wall_clock_seconds: f64,
}

impl From<&SeedOutcome> for SeedReport {
    fn from(o: &SeedOutcome) -> Self {
        SeedReport {
            seed: o.seed,
            test: o.test.clone(),
            best_epoch: o.trace.best_epoch,
            epochs_run: o.trace.epochs_run,
            best_val_accuracy: o.trace.best_score,
            val_accuracy_curve: o.trace.scores.clone(),
            train_loss_curve: o.train_loss.clone(),
            wall_clock_seconds: o.wall_clock_seconds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub head_parameter_count: usize,
    pub total_parameter_count: usize,
    pub seeds: Vec<SeedReport>,
    pub accuracy: Summary,
    pub macro_f1: Summary,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct MultiSeedRun {
    pub report: RunReport,
    pub outcomes: Vec<SeedOutcome>,
}

/// Independent fit + test evaluation for every seed in `cfg.seeds`.
pub fn multi_seed_run(
    spec: &ModelSpec,
    data: &Splits<'_>,
    cfg: &TrainConfig,
    par: Parallelism,
) -> Result<MultiSeedRun> {
    cfg.validate()?;
    let start = Instant::now();
    let probe = spec.build(cfg.seeds[0])?;
    let results = run_jobs(&cfg.seeds, par, |&seed| {
        run_seed(spec, data, cfg, seed).map_err(|e| Error::Seed {
            seed,
            source: Box::new(e),
        })
    });
    let outcomes = results.into_iter().collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = outcomes.iter().map(|o| o.test.accuracy).collect();
    let f1s: Vec<f64> = outcomes.iter().map(|o| o.test.macro_f1).collect();
    let report = RunReport {
        model: spec.clone(),
        train: cfg.clone(),
        head_parameter_count: probe.head_parameter_count(),
        total_parameter_count: probe.params.num_scalars(),
        seeds: outcomes.iter().map(SeedReport::from).collect(),
        accuracy: Summary::of(&accs)?,
        macro_f1: Summary::of(&f1s)?,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(MultiSeedRun { report, outcomes })
}

/// Value sets searched for the `laya` head. Scorer widths are multiples of d*.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpace {
    pub d_star: Vec<usize>,
    pub tau: Vec<f64>,
    pub psi_kind: Vec<PsiKind>,
    pub scorer_width_factor: Vec<usize>,
    /// Empty means the train section's learning rate.
    #[serde(default)]
    pub learning_rate: Vec<f64>,
}

impl GridSpace {
    /// `{64, 96, 128} × {0.5, 1.0, 1.5} × {identity, mlp} × {d*, 2d*}`.
    pub fn reference() -> Self {
        GridSpace {
            d_star: vec![64, 96, 128],
            tau: vec![0.5, 1.0, 1.5],
            psi_kind: vec![PsiKind::Identity, PsiKind::Mlp],
            scorer_width_factor: vec![1, 2],
            learning_rate: Vec::new(),
        }
    }

    /// Cartesian product, d* outermost, then τ, ψ, width, learning rate.
    pub fn enumerate(&self, base: &HeadConfig, default_lr: f64) -> Vec<GridPoint> {
        let lrs = if self.learning_rate.is_empty() {
            vec![default_lr]
        } else {
            self.learning_rate.clone()
        };
        let mut out = Vec::new();
        for &d_star in &self.d_star {
            for &tau in &self.tau {
                for &psi_kind in &self.psi_kind {
                    for &f in &self.scorer_width_factor {
                        for &learning_rate in &lrs {
                            out.push(GridPoint {
                                head: HeadConfig {
                                    kind: HeadKind::Laya,
                                    d_star,
                                    tau,
                                    psi_kind,
                                    scorer_width: f * d_star,
                                    num_classes: base.num_classes,
                                },
                                learning_rate,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub head: HeadConfig,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    /// Position in enumeration order.
    pub index: usize,
    pub point: GridPoint,
    pub val_accuracies: Vec<f64>,
    pub mean_val_accuracy: f64,
    pub std_val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: GridEntry,
    /// Sorted by mean validation accuracy, descending; ties keep enumeration order.
    pub leaderboard: Vec<GridEntry>,
    pub seeds: Vec<u64>,
    pub wall_clock_seconds: f64,
}

/// Scores every grid point by mean best-validation accuracy over `cfg.grid_seeds`.
pub fn grid_search(
    spec: &ModelSpec,
    train: &Dataset,
    val: Option<&Dataset>,
    space: &GridSpace,
    cfg: &TrainConfig,
    par: Parallelism,
) -> Result<GridResult> {
    let points = space.enumerate(&spec.head, cfg.learning_rate);
    if points.is_empty() {
        return Err(Error::Parameter("grid search space is empty".into()));
    }
    if cfg.grid_seeds.is_empty() {
        return Err(Error::config(
            "train.grid_seeds",
            "at least one seed is required",
        ));
    }
    let start = Instant::now();
    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|i| cfg.grid_seeds.iter().map(move |&s| (i, s)))
        .collect();
    let scores = run_jobs(&jobs, par, |&(i, seed)| {
        let pt = &points[i];
        let spec = ModelSpec::new(spec.backbone.clone(), pt.head.clone());
        let cfg = TrainConfig {
            learning_rate: pt.learning_rate,
            ..cfg.clone()
        };
        let mut model = spec.build(seed)?;
        let out = fit(&mut model, train, val, &cfg, seed).map_err(|e| Error::Seed {
            seed,
            source: Box::new(e),
        })?;
        Ok(out.trace.best_score)
    });
    let scores = scores.into_iter().collect::<Result<Vec<f64>>>()?;
    let k = cfg.grid_seeds.len();
    let mut board: Vec<GridEntry> = points
        .into_iter()
        .enumerate()
        .map(|(i, point)| {
            let v = scores[i * k..(i + 1) * k].to_vec();
            GridEntry {
                index: i,
                point,
                mean_val_accuracy: super::stats::mean(&v),
                std_val_accuracy: super::stats::sample_std(&v),
                val_accuracies: v,
            }
        })
        .collect();
    board.sort_by(|a, b| {
        b.mean_val_accuracy
            .total_cmp(&a.mean_val_accuracy)
            .then(a.index.cmp(&b.index))
    });
    Ok(GridResult {
        best: board[0].clone(),
        leaderboard: board,
        seeds: cfg.grid_seeds.clone(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}
