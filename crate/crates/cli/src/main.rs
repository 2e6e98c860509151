//! `rgtn`: generate datasets, train and evaluate fault localizers, run noise sweeps.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad flags, unknown config
//! keys, invalid values), 2 when a command fails while running.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use rgtn_core::dataset::{DatasetSpec, NOISE_LEVELS};
use rgtn_core::graph::{build_topology, TopologyConfig};
use rgtn_core::metrics::{confusion_csv, confusion_svg, curves_svg, metrics_csv, noise_sweep, sweep_csv};
use rgtn_core::train::log_csv;
use rgtn_core::{
    compute_metrics, default_graph, evaluate, generate_dataset, train, Checkpoint, Dataset, ModelGraph, ModelKind,
    Split, SystemGraph, TrainConfig, TrainData, TrainState,
};

#[derive(Parser)]
#[command(name = "rgtn", version, about = "Fault localization in zonal MVDC shipboard networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a labelled dataset and write it to a directory.
    Generate {
        #[command(flatten)]
        topology: TopologyArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Measurement noise as a fraction of each channel's RMS.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Divide every class count by this factor (1 = full dataset).
        #[arg(long, default_value_t = 1)]
        scale: usize,
    },
    /// Train a model on a generated dataset.
    Train {
        #[command(flatten)]
        topology: TopologyArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: Option<ModelKind>,
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from `<out>/checkpoint.json` if it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a dataset's test split.
    Evaluate {
        #[command(flatten)]
        topology: TopologyArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate each model at each noise level.
    Sweep {
        #[command(flatten)]
        topology: TopologyArg,
        /// Comma-separated model kinds.
        #[arg(long, value_delimiter = ',', default_value = "rgtn,mlp,gcn,gat,gtn")]
        models: Vec<ModelKind>,
        /// Comma-separated noise fractions.
        #[arg(long, value_delimiter = ',', default_values_t = NOISE_LEVELS)]
        levels: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Dataset seed (the training seed comes from the config).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        scale: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write the training log and curves stored in a checkpoint.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TopologyArg {
    /// Topology file; the built-in 4-zone network when omitted.
    #[arg(long)]
    topology: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

/// A failure that is the caller's fault rather than the run's.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    Usage(e.to_string()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Generate {
            topology,
            out,
            seed,
            noise,
            scale,
        } => {
            if scale == 0 {
                return Err(usage("--scale must be at least 1"));
            }
            if !(0.0..=rgtn_core::sim::MAX_NOISE).contains(&noise) {
                return Err(usage(format!("--noise {noise} is outside [0, {}]", rgtn_core::sim::MAX_NOISE)));
            }
            let graph = load_graph(&topology)?;
            let dataset = generate_dataset(&graph, seed, noise, &spec(scale))?;
            dataset.write(&out)?;
            println!(
                "wrote {} samples ({} train, {} test) to {}",
                dataset.samples.len(),
                dataset.manifest.train_indices.len(),
                dataset.manifest.test_indices.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            topology,
            data,
            out,
            model,
            config,
            resume,
        } => {
            let mut cfg = resolve_config(&config)?;
            if let Some(model) = model {
                cfg.model = model;
            }
            let graph = load_graph(&topology)?;
            let dataset = load_dataset(&data, &graph)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let ckpt_path = out.join("checkpoint.json");
            let (train_set, test_set) = (dataset.normalized(Split::Train)?, dataset.normalized(Split::Test)?);
            let first = train_set.first().context("training split is empty")?;
            let state = if resume && ckpt_path.exists() {
                let ckpt = Checkpoint::load(&ckpt_path)?;
                ckpt.check_topology(graph.config_hash())?;
                let mut state = ckpt.training.context("checkpoint has no training state to resume")?;
                if state.config.model != cfg.model {
                    bail!("checkpoint was trained as {}, not {}", state.config.model, cfg.model);
                }
                state.config.epochs = cfg.epochs;
                state
            } else {
                TrainState::new(&cfg, first.nodes, first.steps, first.features)?
            };
            fs::write(out.join("config.toml"), state.config.to_toml()?)?;
            let model_graph = ModelGraph::new(&graph, state.config.neighborhood);
            let data = TrainData {
                graph: &model_graph,
                train: &train_set,
                test: &test_set,
            };
            let hash = graph.config_hash().to_string();
            let done = train(state, &data, |s| {
                let row = s.log.last().expect("one row per epoch");
                println!(
                    "epoch {:>3}  loss {:.4}  train {:.2}%  test {:.2}%  {:.1}s",
                    row.epoch,
                    row.loss,
                    row.train_acc * 100.0,
                    row.test_acc * 100.0,
                    row.seconds
                );
                let mut ckpt = Checkpoint::new(s.best_parameters.clone(), &hash);
                ckpt.training = Some(s.clone());
                ckpt.save(&ckpt_path)
            })?;
            write_log(&done, &out)?;
            println!(
                "best test accuracy {:.2}% at epoch {}; checkpoint in {}",
                done.best_accuracy * 100.0,
                done.best_epoch,
                ckpt_path.display()
            );
            Ok(())
        }
        Command::Evaluate {
            topology,
            checkpoint,
            data,
            out,
        } => {
            let graph = load_graph(&topology)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            ckpt.check_topology(graph.config_hash())?;
            let dataset = load_dataset(&data, &graph)?;
            let test_set = dataset.normalized(Split::Test)?;
            let model_graph = ModelGraph::new(&graph, ckpt.parameters.architecture.neighborhood);
            let cm = evaluate(&ckpt.parameters, &model_graph, &test_set)?;
            let m = compute_metrics(&cm);
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let name = ckpt.parameters.architecture.kind.to_string();
            fs::write(out.join("metrics.csv"), metrics_csv(&[(name, m)]))?;
            fs::write(out.join("confusion_counts.csv"), confusion_csv(&cm, false))?;
            fs::write(out.join("confusion_normalized.csv"), confusion_csv(&cm, true))?;
            fs::write(out.join("confusion.svg"), confusion_svg(&cm))?;
            println!(
                "accuracy {:.2}%  recall {:.2}%  precision {:.2}%  f1 {:.2}%",
                m.accuracy * 100.0,
                m.recall * 100.0,
                m.precision * 100.0,
                m.f1 * 100.0
            );
            Ok(())
        }
        Command::Sweep {
            topology,
            models,
            levels,
            out,
            seed,
            scale,
            config,
        } => {
            let cfg = resolve_config(&config)?;
            if scale == 0 {
                return Err(usage("--scale must be at least 1"));
            }
            if models.is_empty() || levels.is_empty() {
                return Err(usage("--models and --levels need at least one entry"));
            }
            if let Some(bad) = levels.iter().find(|l| !(0.0..=rgtn_core::sim::MAX_NOISE).contains(*l)) {
                return Err(usage(format!("noise level {bad} is outside [0, {}]", rgtn_core::sim::MAX_NOISE)));
            }
            let graph = load_graph(&topology)?;
            let table = noise_sweep(&graph, &models, &levels, &cfg, seed, &spec(scale), |kind, level, state| {
                println!(
                    "{kind} at {:.0}% noise: best test accuracy {:.2}% (epoch {})",
                    level * 100.0,
                    state.best_accuracy * 100.0,
                    state.best_epoch
                );
            })?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            fs::write(out.join("sweep.csv"), sweep_csv(&table))?;
            print!("{}", sweep_csv(&table));
            Ok(())
        }
        Command::Export { checkpoint, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let state = ckpt.training.context("checkpoint has no training log")?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_log(&state, &out)?;
            println!("wrote {} log rows to {}", state.log.len(), out.display());
            Ok(())
        }
    }
}

fn spec(scale: usize) -> DatasetSpec {
    if scale == 1 {
        DatasetSpec::default()
    } else {
        DatasetSpec::scaled(scale)
    }
}

fn load_graph(arg: &TopologyArg) -> anyhow::Result<SystemGraph> {
    match &arg.topology {
        None => Ok(default_graph()),
        Some(path) => Ok(build_topology(&TopologyConfig::load(path)?)?),
    }
}

fn load_dataset(dir: &Path, graph: &SystemGraph) -> anyhow::Result<Dataset> {
    let dataset = Dataset::load(dir)?;
    if dataset.manifest.topology_hash != graph.config_hash() {
        bail!("dataset in {} was generated for a different topology", dir.display());
    }
    Ok(dataset)
}

fn resolve_config(args: &ConfigArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::from_toml(&text).map_err(usage)?
        }
        None => TrainConfig::default(),
    };
    for o in &args.overrides {
        cfg.set(o).map_err(usage)?;
    }
    Ok(cfg)
}

fn write_log(state: &TrainState, out: &Path) -> anyhow::Result<()> {
    fs::write(out.join("log.csv"), log_csv(&state.log))?;
    fs::write(out.join("curves.svg"), curves_svg(&state.log))?;
    Ok(())
}
