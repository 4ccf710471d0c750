use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use stockdd::augment::AugmentMode;
use stockdd::backtest::CostMode;
use stockdd::checkpoint;
use stockdd::data::{SplitKind, N_FACTORS};
use stockdd::io;
use stockdd::model::{DisentangleModel, GruBaseline};
use stockdd::pipeline::{self, DistillMode, TrainConfig};
use stockdd::report;
use stockdd::synth::{generate_synthetic_market, SynthParams};

#[derive(Parser)]
#[command(name = "stockdd", version, about = "Disentangled return forecasting with self-distillation and latent-swap augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic market as bars.csv (and optionally samples.csv).
    GenData {
        #[arg(long, default_value_t = 100)]
        stocks: usize,
        #[arg(long, default_value_t = 750)]
        days: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the labelled, normalized samples.
        #[arg(long)]
        samples: bool,
    },
    /// Run round 0, the distillation rounds and the baseline into a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        aug_count: Option<usize>,
        #[arg(long)]
        aug_epsilon: Option<f64>,
        #[arg(long)]
        aug_mode: Option<AugmentMode>,
        #[arg(long)]
        distill: Option<DistillMode>,
        /// Initialize each student from its teacher instead of fresh weights.
        #[arg(long)]
        warm_start: bool,
        /// Extra `key=value` config overrides.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write per-sample predictions of a checkpoint on one split.
    Predict {
        /// Run directory holding config.toml.
        #[arg(long)]
        run: PathBuf,
        /// Defaults to RUN/final.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: SplitKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Daily IC / Rank IC and classification scores of a predictions file.
    Evaluate {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-k backtest of one or more predictions files.
    Backtest {
        #[arg(long, value_delimiter = ',', default_value = "30,50,100,200")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 0.004)]
        cost: f64,
        #[arg(long, default_value = "turnover")]
        cost_mode: CostMode,
        /// Predictions file; repeat to compare several models.
        #[arg(long, required = true)]
        preds: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metric tables, subset win ratios and backtest finals of a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Train once per value of a config field, e.g. `--param xi=0.6,0.8,1.0`.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        param: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    stockdd::runtime::tune_allocator();
    match Cli::parse().command {
        Command::GenData {
            stocks,
            days,
            seed,
            out,
            samples,
        } => {
            std::fs::create_dir_all(&out)?;
            let bars = generate_synthetic_market(stocks, days, seed, &SynthParams::default())?;
            io::write_bars(&out.join("bars.csv"), &bars)?;
            info!("wrote {} bars", bars.len());
            if samples {
                let ds = pipeline::dataset_from_bars(&bars, stockdd::data::WINDOW)?;
                io::save_dataset(&out.join("samples.csv"), &ds)?;
                info!("wrote {} samples", ds.samples.len());
            }
        }
        Command::Train {
            config,
            out,
            aug_count,
            aug_epsilon,
            aug_mode,
            distill,
            warm_start,
            overrides,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            for kv in &overrides {
                let (k, v) = kv.split_once('=').with_context(|| format!("override {kv:?} is not KEY=VALUE"))?;
                cfg = cfg.with_override(k, v)?;
            }
            if aug_count.is_some() {
                cfg.aug_count = aug_count;
            }
            if aug_epsilon.is_some() {
                cfg.aug_epsilon = aug_epsilon;
            }
            if let Some(m) = aug_mode {
                cfg.augment = m;
            }
            if let Some(d) = distill {
                cfg.distill = d;
            }
            cfg.warm_start |= warm_start;
            cfg.validate()?;
            let s = pipeline::run_training(&cfg, &out)?;
            if let Some(t) = &s.test {
                println!(
                    "final round {}: test IC {:.4}, Rank IC {:.4}",
                    s.final_round, t.pre_e.mean_ic, t.pre_e.mean_rank_ic
                );
            }
        }
        Command::Predict {
            run,
            checkpoint: ckpt,
            split,
            out,
        } => {
            let cfg = TrainConfig::load(&run.join("config.toml"))?;
            let ds = pipeline::prepare_dataset(&cfg)?;
            let path = ckpt.unwrap_or_else(|| run.join("final.ckpt"));
            let (_, meta) = checkpoint::load(&path)?;
            let kind = checkpoint_kind(&meta);
            let rows = match kind.as_str() {
                "disentangle" => {
                    let (m, _) = DisentangleModel::load(&path)?;
                    check_width(m.config.factors, m.config.window, ds.window)?;
                    pipeline::predict_rows(&m, &ds, split)?
                }
                "gru_baseline" => {
                    let (m, _) = GruBaseline::load(&path)?;
                    check_width(m.config.factors, m.config.window, ds.window)?;
                    pipeline::predict_rows_baseline(&m, &ds, split)?
                }
                other => bail!("{}: unknown checkpoint kind {other:?}", path.display()),
            };
            report::write_predictions(&out, &rows)?;
            info!("wrote {} predictions", rows.len());
        }
        Command::Evaluate { preds, out } => {
            let rows = report::read_predictions(&preds)?;
            let rep = report::evaluate_to_dir(&rows, &out)?;
            println!("IC {:.4}, Rank IC {:.4}", rep.pre_e.mean_ic, rep.pre_e.mean_rank_ic);
            if let Some(c) = &rep.pre_m {
                println!("market accuracy {:.4}, macro F1 {:.4}", c.accuracy, c.macro_f1);
            }
        }
        Command::Backtest {
            k,
            cost,
            cost_mode,
            preds,
            out,
        } => {
            let mut sets = Vec::new();
            for p in &preds {
                let name = p.file_stem().map_or("preds".into(), |s| s.to_string_lossy().into_owned());
                sets.push((name, report::read_predictions(p)?));
            }
            for (name, k, v) in pipeline::backtest_dir(&out, &sets, &k, cost, cost_mode)? {
                println!("{name} k={k}: accumulated {:.2}%", 100.0 * v);
            }
        }
        Command::Report { run } => {
            report::build_report(&run)?;
            println!("{}", run.join("report.md").display());
        }
        Command::Sweep { config, param, out } => {
            let cfg = load_config(config.as_deref())?;
            let (key, values) = param.split_once('=').context("--param expects KEY=V1,V2,...")?;
            let values: Vec<String> = values.split(',').map(str::to_string).collect();
            let table = pipeline::run_sweep(&cfg, key, &values, &out)?;
            for row in table {
                println!("{}", row.join("\t"));
            }
        }
    }
    Ok(())
}

fn checkpoint_kind(meta: &str) -> String {
    serde_json::from_str::<serde_json::Value>(meta)
        .ok()
        .and_then(|v| v.get("kind").and_then(|k| k.as_str()).map(str::to_string))
        .unwrap_or_default()
}

fn check_width(factors: usize, window: usize, data_window: usize) -> Result<()> {
    if factors != N_FACTORS || window != data_window {
        bail!(
            "checkpoint expects {factors}x{window} features but the data provides {N_FACTORS}x{data_window}"
        );
    }
    Ok(())
}
