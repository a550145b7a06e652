//! `left`: train, evaluate, ablate and sweep the tri-view anomaly detector.

mod commands;
mod config;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use left_core::FusionStrategy;

use commands::{EvalRequest, SweepAxes, SweepGrid};
use config::RunConfig;
use error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "left", version, about = "Tri-view time-series anomaly detection")]
struct Cli {
    /// Dataset root; `<root>/<NAME>/manifest.toml` describes each dataset.
    #[arg(long, global = true, env = "LEFT_DATA_ROOT")]
    data_root: Option<PathBuf>,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, the training log and a config snapshot.
    Train(RunArgs),
    /// Score the test split of a trained run.
    Eval(EvalArgs),
    /// Train the 16 component ablations and the 5 fusion strategies.
    Ablate(RunArgs),
    /// Sensitivity grids over loss weights, fusion size or score weights.
    Sweep(SweepArgs),
    /// Write a synthetic labeled corpus in the dataset layout.
    Synth(SynthArgs),
}

/// Flags shared by every command that trains. Each overrides the config file.
#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run configuration; flags win on conflict.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    fusion: Option<FusionStrategy>,
    #[arg(long)]
    fusion_depth: Option<usize>,
    /// Token width of the encoders and the fusion module.
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Downsampling factors, coarse to fine.
    #[arg(long, value_delimiter = ',')]
    factors: Option<Vec<usize>>,
    #[arg(long)]
    no_interaction: bool,
    #[arg(long)]
    fixed_filterbank: bool,
    #[arg(long)]
    no_cycle: bool,
    #[arg(long)]
    no_cross_path: bool,
    /// Length of the generated corpus when the dataset is `synth`.
    #[arg(long)]
    synth_length: Option<usize>,
    #[command(flatten)]
    score: ScoreArgs,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    alpha_cyc: Option<f64>,
    #[arg(long)]
    alpha_ms: Option<f64>,
    /// Moving-average width of the cycle score.
    #[arg(long)]
    kappa: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Checkpoint to score instead of `<run>/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluate on another dataset than the one trained on.
    #[arg(long)]
    dataset: Option<String>,
    /// Output directory; defaults to `<run>/eval`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    score: ScoreArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    grid: SweepGrid,
    /// First axis: λ_cyc, fusion depth or α_cyc.
    #[arg(long, value_delimiter = ',')]
    first: Vec<f64>,
    /// Second axis: λ_cons, fusion width or α_ms.
    #[arg(long, value_delimiter = ',')]
    second: Vec<f64>,
    /// For `--grid score`: reuse this run's model instead of training one.
    #[arg(long)]
    run: Option<PathBuf>,
    #[command(flatten)]
    common: RunArgs,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Dataset root to write into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "synth")]
    name: String,
    #[arg(long, default_value_t = 20_000)]
    length: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

impl ScoreArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.alpha_cyc {
            cfg.score.alpha_cyc = v;
        }
        if let Some(v) = self.alpha_ms {
            cfg.score.alpha_ms = v;
        }
        if let Some(v) = self.kappa {
            cfg.score.kappa = v;
        }
    }
}

impl RunArgs {
    fn resolve(&self, data_root: Option<PathBuf>) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if data_root.is_some() {
            cfg.data_root = data_root;
        }
        if let Some(v) = &self.dataset {
            cfg.dataset = v.clone();
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        let t = &mut cfg.train;
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.lr {
            t.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.patience {
            t.patience = v;
        }
        if let Some(v) = self.fusion {
            cfg.fusion.strategy = v;
        }
        if let Some(v) = self.fusion_depth {
            cfg.fusion.depth = v;
        }
        if let Some(v) = self.d_model {
            cfg.fusion.d_model = v;
            cfg.encoder.d_model = v;
        }
        if let Some(v) = self.tau {
            cfg.filterbank.tau = v;
        }
        if let Some(v) = &self.factors {
            cfg.filterbank.factors = v.clone();
            cfg.encoder.patch_lengths = vec![cfg.encoder.patch_lengths.first().copied().unwrap_or(8); v.len()];
            cfg.train.loss_weights = left_core::LossWeights::uniform(v.len());
        }
        let a = &mut cfg.ablation;
        a.interaction &= !self.no_interaction;
        a.learnable_filterbank &= !self.fixed_filterbank;
        a.cycle &= !self.no_cycle;
        a.cross_path &= !self.no_cross_path;
        if let Some(v) = self.synth_length {
            cfg.synth.length = v;
        }
        self.score.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve(cli.data_root)?;
            let run = commands::train(&cfg)?;
            println!("model: {}", run.dir.join(commands::MODEL_FILE).display());
        }
        Command::Eval(args) => {
            let req = EvalRequest { run: args.run.clone(), checkpoint: args.checkpoint.clone(), out: args.out.clone() };
            let metrics = commands::eval(&req, |cfg| {
                if cli.data_root.is_some() {
                    cfg.data_root = cli.data_root.clone();
                }
                if let Some(d) = &args.dataset {
                    cfg.dataset = d.clone();
                }
                args.score.apply(cfg);
            })?;
            print!("{metrics}");
        }
        Command::Ablate(args) => {
            let cfg = args.resolve(cli.data_root)?;
            print!("{}", commands::ablate(&cfg)?.render());
        }
        Command::Sweep(args) => {
            let cfg = args.common.resolve(cli.data_root)?;
            let axes = SweepAxes { first: args.first, second: args.second, run: args.run };
            print!("{}", commands::sweep(&cfg, args.grid, &axes)?.render());
        }
        Command::Synth(args) => {
            let dir = commands::synth(&args.out, &args.name, args.length, args.seed)?;
            println!("dataset: {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "dataset = \"SMD\"\n[train]\nepochs = 9\nbatch_size = 32\n").unwrap();
        let cli = Cli::parse_from(["left", "train", "--config", path.to_str().unwrap(), "--epochs", "2", "--no-cycle"]);
        let Command::Train(args) = cli.command else { panic!("parsed {:?}", cli.command) };
        let cfg = args.resolve(None).unwrap();
        assert_eq!(cfg.dataset, "SMD");
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 32);
        assert!(!cfg.ablation.cycle && cfg.ablation.interaction);
    }

    #[test]
    fn invalid_flags_are_input_errors() {
        let cli = Cli::parse_from(["left", "train", "--lr=-1"]);
        let Command::Train(args) = cli.command else { unreachable!() };
        assert_eq!(args.resolve(None).unwrap_err().exit_code(), 2);
    }
}
