use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use occam::envs::EnvKind;
use occam::harness::{self, EvalMode, ExperimentConfig};
use occam::metatrain::{self, Dataset};
use occam::perfmodel::Checkpoint;
use occam::{Error, Result};

#[derive(Parser)]
#[command(name = "occam", version, about = "Meta-learned performance models for online controller tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default config for an environment.
    InitConfig {
        #[arg(value_parser = parse_env)]
        env: EnvKind,
    },
    /// Sample the training dataset.
    GenData(ConfigArgs),
    /// Phase 1: fit the basis network with a fixed last layer.
    Pretrain(ConfigArgs),
    /// Phase 2: meta-train network and filter prior from the pretrained checkpoint.
    MetaTrain(ConfigArgs),
    /// Run online sessions on out-of-distribution systems.
    Evaluate(ConfigArgs),
    /// Recompute summary and curves from existing run logs.
    Aggregate(ConfigArgs),
    /// Dump checkpoint weights as CSV.
    ExportWeights {
        checkpoint: PathBuf,
        /// Destination; stdout when omitted.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn parse_env(s: &str) -> std::result::Result<EnvKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&args.config, &args.overrides)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    Ok(cfg)
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let path = cfg.dataset_path();
    let ds = Dataset::load(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if ds.env != cfg.env.name() {
        return Err(Error::Config(format!("dataset is for {}, config is for {}", ds.env, cfg.env.name())));
    }
    Ok(ds)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("{}: {io}", path.display())),
        other => other,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitConfig { env } => {
            print!("{}", ExperimentConfig::for_env(env).to_toml());
        }
        Command::GenData(args) => {
            let cfg = load(&args)?;
            let env = cfg.environment()?;
            let ds = harness::gen_dataset(env.as_ref(), cfg.data.batches, cfg.data.batch_size, cfg.seed)?;
            ds.save(&cfg.dataset_path())?;
            let mut w = std::io::BufWriter::new(std::fs::File::create(cfg.output_dir.join("dataset_summary.csv"))?);
            harness::write_dataset_summary(&ds, &mut w)?;
            w.flush()?;
            info!("wrote {} batches to {}", ds.len(), cfg.dataset_path().display());
        }
        Command::Pretrain(args) => {
            let cfg = load(&args)?;
            let ds = load_dataset(&cfg)?;
            let (ckpt, log) = metatrain::pretrain_from_scratch(cfg.model_config()?, &ds, &cfg.train)?;
            ckpt.save(&cfg.pretrained_path())?;
            log.save(&cfg.output_dir.join("train_log_pretrain.csv"))?;
            info!("pretrained checkpoint at {}", cfg.pretrained_path().display());
        }
        Command::MetaTrain(args) => {
            let cfg = load(&args)?;
            let ds = load_dataset(&cfg)?;
            let pre = load_checkpoint(&cfg.pretrained_path())?;
            let (ckpt, log) = metatrain::meta_train_checkpoint(&pre, &ds, &cfg.train)?;
            ckpt.save(&cfg.meta_path())?;
            log.save(&cfg.output_dir.join("train_log_meta.csv"))?;
            if log.skipped > 0 {
                log::warn!("{} meta-steps skipped on non-SPD matrices", log.skipped);
            }
            info!("meta-trained checkpoint at {}", cfg.meta_path().display());
        }
        Command::Evaluate(args) => {
            let cfg = load(&args)?;
            let env = cfg.environment()?;
            let needs_meta = cfg.eval.modes.iter().any(|m| *m != EvalMode::NoMeta);
            let needs_pre = cfg.eval.modes.contains(&EvalMode::NoMeta);
            let meta = needs_meta.then(|| load_checkpoint(&cfg.meta_path())).transpose()?;
            let pre = needs_pre.then(|| load_checkpoint(&cfg.pretrained_path())).transpose()?;
            let logs = harness::evaluate(&cfg, env.as_ref(), meta.as_ref(), pre.as_ref())?;
            let singular: usize = logs.iter().map(|l| l.singularities).sum();
            harness::write_eval_outputs(&cfg.eval_dir(), &logs)?;
            for s in harness::summarize(&logs) {
                info!(
                    "{:>12}: final reward {:.3} ± {:.3}, last-5 value {:.4}, crashes {:.1}%",
                    s.mode.name(),
                    s.final_reward_mean,
                    s.final_reward_std,
                    s.last5_value_mean,
                    s.crash_pct
                );
            }
            if singular > 0 {
                return Err(Error::Numerical(format!("{singular} filter updates hit non-SPD matrices")));
            }
        }
        Command::Aggregate(args) => {
            let cfg = load(&args)?;
            let logs = harness::read_eval_logs(&cfg.eval_dir())?;
            harness::write_aggregates(&cfg.eval_dir(), &logs)?;
        }
        Command::ExportWeights { checkpoint, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            match out {
                Some(p) => harness::export_weights(&ckpt, std::io::BufWriter::new(std::fs::File::create(p)?))?,
                None => harness::export_weights(&ckpt, std::io::stdout().lock())?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
