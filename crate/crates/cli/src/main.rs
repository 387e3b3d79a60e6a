use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use capsosr::harness::{
    calibrate, evaluate, load_experiment_data, metrics_from_samples, run_ablation, AblationPlan, Checkpoint,
    EvalOutput, ExperimentConfig, RunLog, Trainer,
};
use capsosr::protocol::make_splits;

#[derive(Parser)]
#[command(name = "capsosr", version, about = "Open set recognition with variational capsule networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set loss.alpha=2.0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        Ok(base.with_overrides(&self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw seeded known/unknown class splits and write the split file.
    Splits {
        #[arg(long, default_value = "mnist")]
        dataset: String,
        #[arg(long, default_value_t = 10)]
        n_classes: usize,
        #[arg(long, default_value_t = 5)]
        n_splits: usize,
        #[arg(long, default_value_t = 6)]
        known: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the known classes of a split.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Append JSON-lines step and epoch records here.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from this checkpoint; its config is used and `--config`/`--set` are ignored.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Fit class densities and set rejection thresholds on held-out training samples.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the calibration report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate a calibrated checkpoint on the open test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write metrics and per-sample scores as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the α × m_k grid and architecture variants.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 1.0, 2.0])]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![5.0, 10.0, 20.0])]
        margins: Vec<f64>,
        /// Skip the target/routing/head variants.
        #[arg(long)]
        grid_only: bool,
        /// Write the table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute and print metrics from evaluation outputs.
    Report {
        #[arg(required = true)]
        evals: Vec<PathBuf>,
    },
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Splits {
            dataset,
            n_classes,
            n_splits,
            known,
            seed,
            out,
        } => {
            let file = make_splits(&dataset, n_classes, n_splits, known, seed)?;
            file.save(&out)?;
            for spec in file.specs()? {
                println!("known {:?} unknown {:?} openness {:.4}", spec.known_classes, spec.unknown_classes, spec.openness);
            }
        }
        Command::Train {
            config,
            out,
            log,
            resume,
            until,
        } => {
            let mut trainer = match &resume {
                Some(path) => Trainer::from_checkpoint(&Checkpoint::load(path)?)?,
                None => {
                    let cfg = config.load()?;
                    let split = capsosr::harness::resolve_split(&cfg)?;
                    Trainer::new(cfg, split.known_classes)?
                }
            };
            let data = load_experiment_data(trainer.config())?;
            let mut run_log = match &log {
                Some(path) => RunLog::append_to(path)?,
                None => RunLog::in_memory(),
            };
            let total = until.unwrap_or_else(|| trainer.total_steps(data.train.len()));
            trainer.run_until(&data.train, total, &mut run_log)?;
            trainer.checkpoint()?.save(&out)?;
            println!("step {} loss {:?}", trainer.step(), trainer.last_loss());
        }
        Command::Calibrate {
            checkpoint,
            out,
            report,
        } => {
            let mut ckpt = Checkpoint::load(&checkpoint)?;
            let data = load_experiment_data(&ckpt.config)?;
            let rep = calibrate(&mut ckpt, &data)?;
            ckpt.save(&out)?;
            if let Some(path) = report {
                write_json(&path, &rep)?;
            }
            print_json(&rep)?;
        }
        Command::Eval { checkpoint, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let data = load_experiment_data(&ckpt.config)?;
            let eval = evaluate(&ckpt, &data.test)?;
            if let Some(path) = out {
                write_json(&path, &eval)?;
            }
            print_json(&eval.report)?;
        }
        Command::Ablate {
            config,
            alphas,
            margins,
            grid_only,
            out,
        } => {
            let cfg = config.load()?;
            let data = load_experiment_data(&cfg)?;
            let plan = AblationPlan {
                alphas,
                margins,
                variants: !grid_only,
            };
            let table = run_ablation(&cfg, &plan, &data)?;
            if let Some(path) = out {
                write_json(&path, &table)?;
            }
            print!("{}", table.render());
        }
        Command::Report { evals } => {
            for path in evals {
                let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                let eval: EvalOutput = serde_json::from_str(&text)?;
                let k = eval.report.per_class_f1.len().checked_sub(1);
                let Some(k) = k.filter(|&k| k > 0) else {
                    bail!("{} has no per-class entries", path.display());
                };
                let report = metrics_from_samples(&eval.samples, k)?;
                let auroc = report.auroc.map_or("n/a".into(), |a| format!("{a:.4}"));
                println!(
                    "{}\tauroc {auroc}\tmacro_f1 {:.4}\tclosed_acc {:.4}\tknown {}\tunknown {}",
                    path.display(),
                    report.macro_f1,
                    report.closed_set_accuracy,
                    report.n_known,
                    report.n_unknown
                );
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
