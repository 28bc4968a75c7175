use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use laya::data::SyntheticSpec;
use laya::training::Parallelism;
use laya::{Error, Result};
use laya_cli::{cmd_analyze, cmd_frozen_train, cmd_gen_synthetic, cmd_grid, cmd_train, RunConfig};

#[derive(Parser)]
#[command(
    name = "laya",
    version,
    about = "Train and analyse layer-wise attention output heads"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; falls back to the config's `out`, then $LAYA_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Concurrent runs; defaults to the number of seeds.
    #[arg(long)]
    parallel: Option<usize>,
    /// Comma-separated seeds replacing `train.seeds`.
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    /// Dotted-path overrides such as `head.tau=1.5`.
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Multi-seed training and evaluation.
    Train(RunArgs),
    /// Grid search over the config's `grid` section.
    Grid(RunArgs),
    /// Recompute attention statistics from a finished run.
    Analyze {
        /// Directory written by `train` or `frozen-train`.
        run_dir: PathBuf,
        /// Defaults to `<run_dir>/analysis`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train only the head on a layer-feature file.
    FrozenTrain {
        #[arg(long)]
        lff: PathBuf,
        #[arg(long)]
        split_manifest: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write a synthetic layer-feature file with one informative layer.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        n: usize,
        /// Comma-separated layer widths.
        #[arg(long, value_delimiter = ',', default_values_t = [16usize, 16, 16])]
        dims: Vec<usize>,
        /// 1-based index of the informative layer.
        #[arg(long, default_value_t = 2)]
        informative_layer: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 5.0)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        split_manifest: Option<PathBuf>,
    },
}

struct Prepared {
    cfg: RunConfig,
    out: PathBuf,
    par: Parallelism,
}

fn prepare(args: &RunArgs, lff: Option<(&Path, Option<&Path>)>) -> Result<Prepared> {
    let mut cfg = match lff {
        Some((f, m)) => RunConfig::load_frozen(&args.config, &args.overrides, f, m)?,
        None => RunConfig::load(&args.config, &args.overrides)?,
    };
    if let Some(seeds) = &args.seed_list {
        if seeds.is_empty() {
            return Err(Error::Usage("--seed-list is empty".into()));
        }
        cfg.train.seeds = seeds.clone();
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .or_else(|| std::env::var_os("LAYA_OUT").map(PathBuf::from))
        .unwrap_or_else(|| {
            let stem = args
                .config
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into());
            Path::new("runs").join(stem)
        });
    let n = args.parallel.unwrap_or(cfg.train.seeds.len());
    if n == 0 {
        return Err(Error::Usage("--parallel must be ≥ 1".into()));
    }
    Ok(Prepared {
        cfg,
        out,
        par: Parallelism::threads(n),
    })
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train(args) => {
            let p = prepare(&args, None)?;
            let o = cmd_train(p.cfg, &p.out, p.par)?;
            let a = &o.report.run.accuracy;
            Ok(format!(
                "accuracy {:.4} ± {:.4} over {} seeds -> {}",
                a.mean,
                a.half_width(),
                a.n,
                o.out.display()
            ))
        }
        Command::Grid(args) => {
            let p = prepare(&args, None)?;
            let g = cmd_grid(p.cfg, &p.out, p.par)?;
            let h = &g.best.point.head;
            Ok(format!(
                "best d*={} tau={} psi={} width={} lr={} val {:.4} ({} configs) -> {}",
                h.d_star,
                h.tau,
                h.psi_kind.name(),
                h.scorer_width,
                g.best.point.learning_rate,
                g.best.mean_val_accuracy,
                g.leaderboard.len(),
                p.out.display()
            ))
        }
        Command::Analyze { run_dir, out } => {
            let out = out.unwrap_or_else(|| run_dir.join("analysis"));
            let s = cmd_analyze(&run_dir, &out)?;
            let means: Vec<String> = s.mean.iter().map(|m| format!("{m:.4}")).collect();
            Ok(format!(
                "mean attention [{}] -> {}",
                means.join(", "),
                out.display()
            ))
        }
        Command::FrozenTrain {
            lff,
            split_manifest,
            run,
        } => {
            let p = prepare(&run, Some((&lff, split_manifest.as_deref())))?;
            let o = cmd_frozen_train(p.cfg, &lff, split_manifest.as_deref(), &p.out, p.par)?;
            Ok(format!(
                "accuracy {:.4} over {} seeds -> {}",
                o.report.run.accuracy.mean,
                o.report.run.accuracy.n,
                o.out.display()
            ))
        }
        Command::GenSynthetic {
            out,
            n,
            dims,
            informative_layer,
            classes,
            separation,
            seed,
            split_manifest,
        } => {
            let spec = SyntheticSpec {
                n,
                dims,
                informative_layer,
                num_classes: classes,
                separation,
                seed,
            };
            cmd_gen_synthetic(&spec, &out, split_manifest.as_deref())?;
            Ok(format!("wrote {}", out.display()))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("usage: {}", line.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}: {}", e.category(), e.detail().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
