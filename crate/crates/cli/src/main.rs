use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mea::checkpoint::{self, Checkpoint};
use mea::config::RunConfig;
use mea::data::{save_dataset, Dataset};
use mea::gradsuite::{gradcheck_all, TOLERANCE};
use mea::metrics::MetricsReport;
use mea::probe::{modality_probe, ProbeOptions};
use mea::train::{attention_csv, infer, load_model, prepare_data, reps_csv, sweep, train, SweepParam};

#[derive(Parser)]
#[command(name = "mea", version, about = "Train and evaluate MEA multimodal fusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set psa.mu=0.25`; repeatable.
    #[arg(short, long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        Ok(RunConfig::load(self.config.as_deref(), &self.set)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and keep the best validation checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (defaults to `output.dir`).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Data and architecture settings; defaults to the checkpoint's own.
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Directory for eval_metrics.csv and optional dumps.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Write pooled exclusive and agnostic representations to reps.csv.
        #[arg(long)]
        dump_reps: bool,
        /// Write modality weights and fusion coefficients to attention.csv.
        #[arg(long)]
        dump_attention: bool,
        /// Fit linear modality probes on training representations.
        #[arg(long)]
        probe: bool,
    },
    /// Retrain once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_parser = ["mu", "alpha", "beta", "psa_layers", "hca_layers"])]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every model component.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
    },
    /// Export a dataset split as a manifest plus payload.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Manifest path; the payload is written next to it.
        #[arg(short, long)]
        out: PathBuf,
        /// Export one split instead of every sample.
        #[arg(long, value_enum)]
        split: Option<Split>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, out } => {
            let cfg = cfg.load()?;
            let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
            let splits = prepare_data(&cfg)?;
            log::info!(
                "training on {} samples ({} val, {} test)",
                splits.train.len(),
                splits.val.len(),
                splits.test.len()
            );
            let outcome = train(&cfg, &splits, Some(&dir))?;
            println!("best epoch {}", outcome.best_epoch);
            println!("validation\n{}", outcome.best_val);
            if let Some(t) = &outcome.test {
                println!("test\n{t}");
            }
            if cfg.output.dump_reps || cfg.output.dump_attention {
                let inf = infer(&outcome.model, &outcome.store, &splits.test, cfg.train.batch_size, true)?;
                dump(&dir, &inf, cfg.output.dump_reps, cfg.output.dump_attention)?;
            }
            println!("artifacts in {}", dir.display());
        }
        Command::Eval {
            checkpoint,
            cfg,
            split,
            out,
            dump_reps,
            dump_attention,
            probe,
        } => {
            let ck = Checkpoint::read(&checkpoint)?;
            let run_cfg = match &cfg.config {
                Some(_) => cfg.load()?,
                None => RunConfig::from_toml_with_overrides(&ck.config.to_toml(), &cfg.set)?,
            };
            let (model, store) = load_model(&ck, Some(&run_cfg))?;
            let splits = prepare_data(&run_cfg)?;
            if splits.info != ck.info {
                bail!(mea::Error::Incompatible(vec![format!(
                    "dataset shape {:?} vs checkpoint {:?}",
                    splits.info, ck.info
                )]));
            }
            let samples = splits.get(split.name())?;
            if samples.is_empty() {
                bail!(mea::Error::Config(format!("split `{}` is empty", split.name())));
            }
            let bs = run_cfg.train.batch_size;
            let inf = infer(&model, &store, samples, bs, dump_reps || dump_attention || probe)?;
            let labels: Vec<_> = samples.iter().map(|s| s.label).collect();
            let report = mea::metrics::compute_metrics(&inf.outputs, &labels, model.info.mode)?;
            println!("{} ({} samples)\n{report}", split.name(), samples.len());
            if let Some(dir) = &out {
                let csv = format!("{}\n{}\n", MetricsReport::csv_header(model.info.mode), report.csv_row());
                checkpoint::write(&dir.join("eval_metrics.csv"), csv.as_bytes())?;
                dump(dir, &inf, dump_reps, dump_attention)?;
            } else if dump_reps || dump_attention {
                bail!(mea::Error::Config("--dump-reps and --dump-attention need --out".into()));
            }
            if probe {
                let fit = infer(&model, &store, &splits.train, bs, true)?;
                let opts = ProbeOptions::default();
                let he = modality_probe(&fit.reps.exclusive, &inf.reps.exclusive, opts)?;
                let ha = modality_probe(&fit.reps.agnostic, &inf.reps.agnostic, opts)?;
                println!("modality probe accuracy: exclusive {he:.4}, agnostic {ha:.4} (chance 0.3333)");
            }
        }
        Command::Sweep {
            cfg,
            param,
            values,
            out,
        } => {
            let cfg = cfg.load()?;
            let param: SweepParam = param.parse()?;
            let dir = out.unwrap_or_else(|| cfg.output.dir.join(format!("sweep_{}", param.name())));
            let csv = sweep(&cfg, param, &values, Some(&dir))?;
            print!("{csv}");
        }
        Command::Gradcheck { seeds, first_seed } => {
            let mut worst = 0.0f64;
            for seed in first_seed..first_seed + seeds {
                let report = gradcheck_all(seed)?;
                for c in &report.components {
                    let verdict = if c.max_rel_error < TOLERANCE { "ok" } else { "FAIL" };
                    println!(
                        "seed {seed:>3}  {:<20} {:>10.3e}  {:>6} entries  {verdict}",
                        c.name, c.max_rel_error, c.checked
                    );
                }
                worst = worst.max(report.max_rel_error());
            }
            println!("max relative error {worst:.3e} (tolerance {TOLERANCE:e})");
            if worst >= TOLERANCE {
                return Err(anyhow::Error::msg("gradient check failed").context(GradcheckFailedMarker));
            }
        }
        Command::GenData { cfg, out, split } => {
            let cfg = cfg.load()?;
            let splits = prepare_data(&cfg)?;
            let (name, samples) = match split {
                Some(s) => (s.name(), splits.get(s.name())?.to_vec()),
                None => {
                    let mut all = splits.train.clone();
                    all.extend(splits.val.iter().cloned());
                    all.extend(splits.test.iter().cloned());
                    ("all", all)
                }
            };
            let count = samples.len();
            save_dataset(
                &out,
                &Dataset {
                    info: splits.info,
                    split: name.to_string(),
                    samples,
                },
            )?;
            println!("wrote {count} samples to {}", out.display());
        }
    }
    Ok(())
}

#[derive(Debug)]
struct GradcheckFailedMarker;

impl std::fmt::Display for GradcheckFailedMarker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("one or more components exceeded the tolerance")
    }
}

fn dump(dir: &Path, inf: &mea::train::Inference, reps: bool, attention: bool) -> Result<()> {
    if reps {
        checkpoint::write(&dir.join("reps.csv"), reps_csv(inf).as_bytes())?;
    }
    if attention {
        checkpoint::write(&dir.join("attention.csv"), attention_csv(inf).as_bytes())?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<GradcheckFailedMarker>().is_some() {
        return 3;
    }
    match err.downcast_ref::<mea::Error>() {
        Some(mea::Error::Divergence { .. } | mea::Error::NonFinite { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
