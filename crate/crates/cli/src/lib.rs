//! Subcommand implementations behind the `laya` binary.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use laya::analysis::{
    classwise_profiles, export_report, global_stats, AttentionManifest, AttentionStats,
    SampleAttention,
};
use laya::autodiff::Tensor;
use laya::data::{generate_synthetic_lff, SplitManifest, SyntheticSpec};
use laya::model::ModelSpec;
use laya::params::ParamStore;
use laya::report::{fmt_f64, read_json, write_json, write_text};
use laya::training::{
    grid_search, multi_seed_run, predict, GridResult, Parallelism, RunReport, Splits,
};
use laya::{Error, Result};

pub use config::{load_data, DatasetConfig, LoadedData, RunConfig};

pub const RUN_CONFIG_JSON: &str = "run_config.json";
pub const REPORT_JSON: &str = "report.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const LEADERBOARD_CSV: &str = "leaderboard.csv";
pub const BEST_CONFIG_JSON: &str = "best_config.json";
pub const VOCAB_TSV: &str = "vocab.tsv";

pub fn params_file(seed: u64) -> String {
    format!("params_seed{seed}.bin")
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub config_hash: String,
    pub run: RunReport,
    /// Pooled over all seeds' test predictions.
    pub attention: Option<AttentionStats>,
    pub attention_manifest: Option<String>,
    pub files: Vec<String>,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn metrics_csv(run: &RunReport) -> String {
    let mut s = String::from("row,accuracy,macro_f1\n");
    for r in &run.seeds {
        let _ = writeln!(
            s,
            "seed_{},{},{}",
            r.seed,
            fmt_f64(r.test.accuracy),
            fmt_f64(r.test.macro_f1)
        );
    }
    let (a, f) = (&run.accuracy, &run.macro_f1);
    for (name, x, y) in [
        ("mean", a.mean, f.mean),
        ("std", a.std, f.std),
        ("ci_low", a.ci_low, f.ci_low),
        ("ci_high", a.ci_high, f.ci_high),
    ] {
        let _ = writeln!(s, "{name},{},{}", fmt_f64(x), fmt_f64(y));
    }
    s
}

/// Pooled attention export over per-seed test predictions.
fn export_attention(
    dir: &Path,
    parts: &[(u64, Tensor, Vec<usize>)],
    labels: &[usize],
    num_classes: usize,
    hash: &str,
) -> Result<(AttentionStats, AttentionManifest)> {
    let l = parts[0].1.last_dim();
    let mut rows = Vec::new();
    let mut all_labels = Vec::new();
    let mut all_preds = Vec::new();
    for (_, a, p) in parts {
        rows.extend_from_slice(a.data());
        all_labels.extend_from_slice(labels);
        all_preds.extend_from_slice(p);
    }
    let pooled = Tensor::new(vec![all_labels.len(), l], rows)?;
    let stats = global_stats(&pooled)?;
    let profile = classwise_profiles(&pooled, &all_labels, &all_preds, num_classes)?;
    let samples: Vec<SampleAttention<'_>> = parts
        .iter()
        .map(|(seed, a, p)| SampleAttention {
            seed: *seed,
            alpha: a,
            labels,
            preds: p,
        })
        .collect();
    let seeds: Vec<u64> = parts.iter().map(|p| p.0).collect();
    let manifest = export_report(dir, &stats, &profile, Some(&samples), hash, &seeds)?;
    Ok((stats, manifest))
}

pub struct TrainOutputs {
    pub out: PathBuf,
    pub report: ReportFile,
}

/// Multi-seed training run writing every artifact into `out`.
pub fn cmd_train(mut cfg: RunConfig, out: &Path, par: Parallelism) -> Result<TrainOutputs> {
    let data = load_data(&mut cfg)?;
    create_dir(out)?;
    let hash = cfg.hash();
    write_json(&out.join(RUN_CONFIG_JSON), &cfg.echo())?;
    let mut files = vec![RUN_CONFIG_JSON.to_string()];
    if let Some(v) = &data.vocab {
        v.save(&out.join(VOCAB_TSV))?;
        files.push(VOCAB_TSV.into());
    }

    let spec = ModelSpec::new(data.backbone.clone(), cfg.head.clone());
    let splits = Splits {
        train: &data.train,
        val: data.val.as_ref(),
        test: &data.test,
    };
    let run = multi_seed_run(&spec, &splits, &cfg.train, par)?;
    for o in &run.outcomes {
        let name = params_file(o.seed);
        o.params.save(&out.join(&name))?;
        files.push(name);
    }
    write_text(&out.join(METRICS_CSV), &metrics_csv(&run.report))?;
    files.push(METRICS_CSV.into());

    let mut attention = None;
    let mut attention_manifest = None;
    if cfg.head.kind.emits_attention() {
        let parts: Vec<(u64, Tensor, Vec<usize>)> = run
            .outcomes
            .iter()
            .map(|o| {
                let a = o
                    .test_predictions
                    .alpha
                    .clone()
                    .expect("head emits attention");
                (o.seed, a, o.test_predictions.preds.clone())
            })
            .collect();
        let (stats, manifest) =
            export_attention(out, &parts, &data.test.labels, data.test.num_classes, &hash)?;
        files.push(manifest.global_csv.clone());
        files.push(manifest.classwise_csv.clone());
        files.extend(manifest.samples_csv.clone());
        files.push(laya::analysis::MANIFEST_JSON.into());
        attention = Some(stats);
        attention_manifest = Some(laya::analysis::MANIFEST_JSON.to_string());
    }
    files.push(REPORT_JSON.into());
    files.sort();
    let report = ReportFile {
        config_hash: hash,
        run: run.report,
        attention,
        attention_manifest,
        files,
    };
    write_json(&out.join(REPORT_JSON), &report)?;
    Ok(TrainOutputs {
        out: out.to_path_buf(),
        report,
    })
}

/// Head-only training on a layer-feature file.
pub fn cmd_frozen_train(
    mut cfg: RunConfig,
    lff: &Path,
    manifest: Option<&Path>,
    out: &Path,
    par: Parallelism,
) -> Result<TrainOutputs> {
    let split_seed = match &cfg.dataset {
        DatasetConfig::Lff { split_seed, .. } => *split_seed,
        _ => 0,
    };
    let abs = |p: &Path| std::path::absolute(p).map_err(|e| Error::io(p, e));
    cfg.dataset = DatasetConfig::Lff {
        path: abs(lff)?,
        split_manifest: manifest.map(abs).transpose()?,
        split_seed,
    };
    cmd_train(cfg, out, par)
}

fn leaderboard_csv(g: &GridResult) -> String {
    let mut s = String::from(
        "rank,index,d_star,tau,psi_kind,scorer_width,learning_rate,mean_val_accuracy,std_val_accuracy,val_accuracies\n",
    );
    for (rank, e) in g.leaderboard.iter().enumerate() {
        let h = &e.point.head;
        let accs: Vec<String> = e.val_accuracies.iter().map(|a| fmt_f64(*a)).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            rank + 1,
            e.index,
            h.d_star,
            fmt_f64(h.tau),
            h.psi_kind.name(),
            h.scorer_width,
            fmt_f64(e.point.learning_rate),
            fmt_f64(e.mean_val_accuracy),
            fmt_f64(e.std_val_accuracy),
            accs.join(";")
        );
    }
    s
}

/// Grid search over the config's `grid` section.
pub fn cmd_grid(mut cfg: RunConfig, out: &Path, par: Parallelism) -> Result<GridResult> {
    let space = cfg
        .grid
        .clone()
        .ok_or_else(|| Error::Usage("config has no grid section".into()))?;
    let n_points = space.enumerate(&cfg.head, cfg.train.learning_rate).len();
    if n_points == 0 {
        return Err(Error::Usage("grid is empty".into()));
    }
    let data = load_data(&mut cfg)?;
    create_dir(out)?;
    let spec = ModelSpec::new(data.backbone.clone(), cfg.head.clone());
    let result = grid_search(
        &spec,
        &data.train,
        data.val.as_ref(),
        &space,
        &cfg.train,
        par,
    )?;
    write_text(&out.join(LEADERBOARD_CSV), &leaderboard_csv(&result))?;
    let mut best = cfg.clone();
    best.head = result.best.point.head.clone();
    best.train.learning_rate = result.best.point.learning_rate;
    best.grid = None;
    write_json(&out.join(BEST_CONFIG_JSON), &best.echo())?;
    write_json(&out.join("grid_result.json"), &result)?;
    Ok(result)
}

/// Recomputes test-split attention from a finished run's parameter dumps.
pub fn cmd_analyze(run_dir: &Path, out: &Path) -> Result<AttentionStats> {
    let cfg_path = run_dir.join(RUN_CONFIG_JSON);
    if !cfg_path.exists() {
        return Err(Error::Usage(format!(
            "{} has no {RUN_CONFIG_JSON}",
            run_dir.display()
        )));
    }
    let mut cfg = RunConfig::from_value(read_json(&cfg_path)?)?;
    if !cfg.head.kind.emits_attention() {
        return Err(Error::Usage(format!(
            "head emits no attention ({} head)",
            cfg.head.kind
        )));
    }
    let data = load_data(&mut cfg)?;
    let spec = ModelSpec::new(data.backbone.clone(), cfg.head.clone());
    let mut parts = Vec::new();
    for &seed in &cfg.train.seeds {
        let p = run_dir.join(params_file(seed));
        if !p.exists() {
            return Err(Error::Usage(format!(
                "missing parameter dump {}",
                p.display()
            )));
        }
        let mut model = spec.build(seed)?;
        model.params.copy_from(&ParamStore::load(&p)?)?;
        let preds = predict(&model, &data.test)?;
        let alpha = preds.alpha.expect("head emits attention");
        parts.push((seed, alpha, preds.preds));
    }
    create_dir(out)?;
    let (stats, _) = export_attention(
        out,
        &parts,
        &data.test.labels,
        data.test.num_classes,
        &cfg.hash(),
    )?;
    Ok(stats)
}

/// Writes a synthetic feature file and, optionally, a stratified manifest.
pub fn cmd_gen_synthetic(spec: &SyntheticSpec, out: &Path, manifest: Option<&Path>) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let set = generate_synthetic_lff(spec, out)?;
    if let Some(m) = manifest {
        SplitManifest::stratified(&set.labels, set.num_classes, spec.seed).save(m)?;
    }
    Ok(())
}
