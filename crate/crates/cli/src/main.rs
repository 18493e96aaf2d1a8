use std::path::PathBuf;
use std::process::ExitCode;

use acp_core::experiment::{self, ExperimentConfig, ExperimentError, GridAxis, Init, RunPaths};
use acp_core::synthcorpus::Split;
use acp_core::transfer;
use clap::{Args, Parser, Subcommand};

/// Two-phase replay spoofing detection pipeline on a synthetic corpus.
#[derive(Debug, Parser)]
#[command(name = "acp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set pre_lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run seed; defaults to the first entry of `seeds`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesise the pre-training and spoofing corpora with manifests.
    GenData(Common),
    /// Self-supervised pre-training with the pair loss.
    Pretrain(Common),
    /// Supervised main training; `--init` is `random` or a checkpoint path.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "random")]
        init: String,
    },
    /// Score a split with a main-training checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "eval")]
        split: String,
    },
    /// Run an experiment grid: lr-grid, data-scale, pair-doubling or init-mode.
    Grid {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: String,
    },
    /// Print the effective configuration as JSON.
    ShowConfig(Common),
}

fn resolve(common: &Common) -> experiment::Result<(ExperimentConfig, u64)> {
    let base = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let cfg = base.with_overrides(&common.overrides)?;
    cfg.validate()?;
    let seed = common.seed.unwrap_or(cfg.seeds[0]);
    Ok((cfg, seed))
}

fn run(cli: Cli) -> experiment::Result<bool> {
    match cli.command {
        Command::GenData(common) => {
            let (cfg, seed) = resolve(&common)?;
            let dir = RunPaths::new(&cfg, seed).data();
            let corpus = experiment::generate_data(&cfg, seed, &dir)?;
            println!(
                "wrote {} pre-training and {} main utterances to {}",
                corpus.pretrain.entries.len(),
                corpus.main.entries.len(),
                dir.display()
            );
        }
        Command::Pretrain(common) => {
            let (cfg, seed) = resolve(&common)?;
            let paths = RunPaths::new(&cfg, seed);
            let bank = experiment::load_bank(&cfg, &paths.data(), "pretrain")?;
            let outcome = experiment::pretrain(&cfg, seed, &bank, &paths.pretrain())?;
            let best = &outcome.history[outcome.best_epoch];
            println!("best epoch {} dev pair loss {:.4}: {}", best.epoch, best.dev_loss, outcome.best.display());
        }
        Command::Train { common, init } => {
            let (cfg, seed) = resolve(&common)?;
            let paths = RunPaths::new(&cfg, seed);
            let (init, tag) = if init == "random" {
                (Init::Random, "random")
            } else {
                (Init::Pretrained(Box::new(transfer::load_checkpoint(&PathBuf::from(&init))?)), "pretrained")
            };
            let bank = experiment::load_bank(&cfg, &paths.data(), "main")?;
            let outcome = experiment::train_main(&cfg, seed, &bank, &init, &paths.train(tag))?;
            let ck = transfer::load_checkpoint(&outcome.best)?;
            experiment::evaluate(&ck, &bank, Split::Dev, &paths.train(tag))?;
            println!("best epoch {} dev EER {:.4}: {}", outcome.best_epoch, outcome.best_dev_eer, outcome.best.display());
        }
        Command::Eval { common, checkpoint, split } => {
            let (cfg, seed) = resolve(&common)?;
            let split = Split::parse(&split).ok_or_else(|| ExperimentError::Config(format!("unknown split {split:?}")))?;
            let paths = RunPaths::new(&cfg, seed);
            let ck = transfer::load_checkpoint(&checkpoint)?;
            let bank = experiment::load_bank(&cfg, &paths.data(), "main")?;
            let tag = checkpoint.parent().and_then(|p| p.file_name()).and_then(|n| n.to_str()).unwrap_or("checkpoint");
            let out = paths.eval(tag.strip_prefix("train_").unwrap_or(tag));
            let ev = experiment::evaluate(&ck, &bank, split, &out)?;
            println!("{split} EER {:.4} at threshold {:.6}; scores in {}", ev.eer, ev.threshold, out.display());
        }
        Command::Grid { common, axis } => {
            let (mut cfg, seed) = resolve(&common)?;
            if common.seed.is_some() {
                cfg.seeds = vec![seed];
            }
            let axis = GridAxis::parse(&axis).ok_or_else(|| ExperimentError::Config(format!("unknown grid axis {axis:?}")))?;
            let report = experiment::run_grid(&cfg, axis)?;
            print!("{}", report.to_text());
            if report.failed() > 0 {
                eprintln!("{} grid run(s) failed", report.failed());
                return Ok(false);
            }
        }
        Command::ShowConfig(common) => {
            let (cfg, _) = resolve(&common)?;
            println!("{}", cfg.to_json());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage problems are configuration errors
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        // failed grid cells are numeric or data failures of individual runs
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
