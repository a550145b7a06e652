//! The five subcommands. Each cell of a grid trains into its own subdirectory.

use std::path::{Path, PathBuf};

use left_core::metrics::{MetricTable, VusConfig};
use left_core::pipeline::{dataset_windows, train_on, DatasetEvidence, EvalReport};
use left_core::training::Trainer;
use left_core::{
    data::write_dataset, synth_generate, Ablation, Checkpoint, FusionStrategy, LeftError, LossWeights, ScoreWeights,
    SeriesDataset, SynthConfig,
};

use crate::config::{RunConfig, SNAPSHOT};
use crate::error::{CliError, CliResult};
use crate::report::{plot_scores, write_metrics, write_scores, write_train_log, SummaryTable};

pub const MODEL_FILE: &str = "model.ckpt";

pub struct TrainedRun {
    pub dir: PathBuf,
    pub trainer: Trainer,
    pub dataset: SeriesDataset,
}

/// Train with `cfg` into `cfg.out`: config snapshot, per-epoch checkpoints,
/// the training log and the final model (best parameters).
pub fn train(cfg: &RunConfig) -> CliResult<TrainedRun> {
    cfg.validate()?;
    let ds = cfg.load_dataset()?;
    let model_cfg = cfg.model_config(&ds)?;
    let dir = cfg.out.clone();
    cfg.write_snapshot(&dir)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.checkpoint_dir = Some(dir.join("checkpoints"));
    log::info!("training {} on {} ({} channels, window {})", model_cfg.ablation, ds.name, ds.channels(), ds.window);
    let trainer = train_on(&ds, model_cfg, train_cfg)?;
    write_train_log(&dir.join("train_log.tsv"), &trainer.log)?;
    trainer.checkpoint().save(&dir.join(MODEL_FILE))?;
    Ok(TrainedRun { dir, trainer, dataset: ds })
}

fn check_compatible(ckpt: &Checkpoint, ds: &SeriesDataset) -> CliResult<()> {
    if ckpt.model.channels != ds.channels() || ckpt.model.length != ds.window {
        return Err(LeftError::ShapeMismatch(format!(
            "checkpoint expects {} channels and window {}, dataset {} has {} channels and window {}",
            ckpt.model.channels,
            ckpt.model.length,
            ds.name,
            ds.channels(),
            ds.window
        ))
        .into());
    }
    Ok(())
}

/// Rebuild the trainer state of a checkpoint against `ds`, so that the memory
/// mixing weight matches the end of training.
fn restore(ckpt: &Checkpoint, ds: &SeriesDataset) -> CliResult<Trainer> {
    check_compatible(ckpt, ds)?;
    let (train, _) = dataset_windows(ds)?;
    let steps = train.len().div_ceil(ckpt.train.batch_size.max(1));
    Ok(Trainer::from_checkpoint(ckpt, steps)?)
}

/// Score the test split and write metrics, scores and plots to `out`.
pub fn evaluate_into(trainer: &Trainer, ds: &SeriesDataset, weights: &ScoreWeights, out: &Path) -> CliResult<EvalReport> {
    let evidence = DatasetEvidence::collect(&trainer.model, ds, trainer.lambda())?;
    let report = evidence.report(&ds.test_labels, weights, &VusConfig::for_window(ds.window))?;
    std::fs::create_dir_all(out).map_err(CliError::io(out))?;
    write_metrics(&out.join("metrics.toml"), &report.metrics)?;
    write_scores(&out.join("scores.tsv"), &report.test, &ds.test_labels)?;
    plot_scores(&out.join("plots"), ds, &report.test)?;
    let weights_text = toml::to_string(weights).map_err(|e| CliError::Input(e.to_string()))?;
    let path = out.join("score_weights.toml");
    std::fs::write(&path, weights_text).map_err(CliError::io(path))?;
    Ok(report)
}

pub struct EvalRequest {
    pub run: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Evaluate a run directory. `overrides` applies command-line changes to the
/// run's snapshot (dataset, data root, score weights).
pub fn eval(req: &EvalRequest, overrides: impl FnOnce(&mut RunConfig)) -> CliResult<MetricTable> {
    let snapshot = req.run.join(SNAPSHOT);
    let mut cfg = RunConfig::from_file(&snapshot)?;
    overrides(&mut cfg);
    cfg.validate()?;
    let ckpt_path = req.checkpoint.clone().unwrap_or_else(|| req.run.join(MODEL_FILE));
    if !ckpt_path.exists() {
        return Err(CliError::Input(format!("checkpoint not found: {}", ckpt_path.display())));
    }
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let ds = cfg.load_dataset()?;
    let trainer = restore(&ckpt, &ds)?;
    let out = req.out.clone().unwrap_or_else(|| req.run.join("eval"));
    Ok(evaluate_into(&trainer, &ds, &cfg.score, &out)?.metrics)
}

fn cell_name(ablation: &Ablation) -> String {
    ablation.to_string().replace("w/o ", "wo-").replace('+', "-")
}

fn train_and_score(cfg: &RunConfig) -> CliResult<MetricTable> {
    let run = train(cfg)?;
    Ok(evaluate_into(&run.trainer, &run.dataset, &cfg.score, &run.dir.join("eval"))?.metrics)
}

/// All sixteen component switches, then every fusion strategy with the full model.
pub fn ablate(cfg: &RunConfig) -> CliResult<SummaryTable> {
    cfg.validate()?;
    let mut table = SummaryTable::new(&["group", "variant", "interaction", "learnable_filterbank", "cycle", "cross_path", "fusion"]);
    let mut full = None;
    for ablation in Ablation::grid() {
        let cell = RunConfig { ablation, out: cfg.out.join(cell_name(&ablation)), ..cfg.clone() };
        let metrics = train_and_score(&cell)?;
        if ablation == Ablation::FULL {
            full = Some(metrics.clone());
        }
        table.push(
            row(["component", &ablation.to_string()], &ablation, cfg.fusion.strategy),
            metrics,
        );
    }
    for strategy in FusionStrategy::ALL {
        let metrics = match (&full, strategy == cfg.fusion.strategy) {
            (Some(m), true) => m.clone(),
            _ => {
                let mut cell = RunConfig { ablation: Ablation::FULL, out: cfg.out.join(format!("fusion-{strategy}")), ..cfg.clone() };
                cell.fusion.strategy = strategy;
                train_and_score(&cell)?
            }
        };
        table.push(row(["fusion", strategy.as_str()], &Ablation::FULL, strategy), metrics);
    }
    table.save(&cfg.out.join("ablation.tsv"))?;
    Ok(table)
}

fn row(head: [&str; 2], a: &Ablation, strategy: FusionStrategy) -> Vec<String> {
    let flag = |b: bool| if b { "on" } else { "off" }.to_string();
    vec![
        head[0].to_string(),
        head[1].to_string(),
        flag(a.interaction),
        flag(a.learnable_filterbank),
        flag(a.cycle),
        flag(a.cross_path),
        strategy.to_string(),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepGrid {
    /// (λ_cyc, λ_cons): one training per cell.
    Loss,
    /// Fusion depth × width: one training per cell.
    Fusion,
    /// (α_cyc, α_ms): scoring only, on one trained model.
    Score,
}

pub struct SweepAxes {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    /// Reuse this run directory's model for the score grid instead of training.
    pub run: Option<PathBuf>,
}

pub fn sweep(cfg: &RunConfig, grid: SweepGrid, axes: &SweepAxes) -> CliResult<SummaryTable> {
    cfg.validate()?;
    if axes.first.is_empty() || axes.second.is_empty() {
        return Err(CliError::Input("both sweep axes need at least one value".into()));
    }
    let (name, columns) = match grid {
        SweepGrid::Loss => ("loss", ["lambda_cyc", "lambda_cons"]),
        SweepGrid::Fusion => ("fusion", ["depth", "width"]),
        SweepGrid::Score => ("score", ["alpha_cyc", "alpha_ms"]),
    };
    let mut table = SummaryTable::new(&columns);
    match grid {
        SweepGrid::Loss => {
            for &lc in &axes.first {
                for &lk in &axes.second {
                    let mut cell = RunConfig { out: cfg.out.join(format!("cyc{lc}-cons{lk}")), ..cfg.clone() };
                    let w = &cfg.train.loss_weights;
                    cell.train.loss_weights = LossWeights::new(w.lambda_ms, lc, lk, w.omega.clone())?;
                    table.push(vec![lc.to_string(), lk.to_string()], train_and_score(&cell)?);
                }
            }
        }
        SweepGrid::Fusion => {
            for &depth in &axes.first {
                for &width in &axes.second {
                    let (depth, width) = (as_count(depth, "depth")?, as_count(width, "width")?);
                    let mut cell = RunConfig { out: cfg.out.join(format!("depth{depth}-width{width}")), ..cfg.clone() };
                    cell.fusion.depth = depth;
                    cell.fusion.d_model = width;
                    cell.encoder.d_model = width;
                    cell.validate()?;
                    table.push(vec![depth.to_string(), width.to_string()], train_and_score(&cell)?);
                }
            }
        }
        SweepGrid::Score => {
            let (trainer, ds) = match &axes.run {
                Some(run) => {
                    let cfg = RunConfig::from_file(&run.join(SNAPSHOT))?;
                    let ds = cfg.load_dataset()?;
                    (restore(&Checkpoint::load(&run.join(MODEL_FILE))?, &ds)?, ds)
                }
                None => {
                    let run = train(&RunConfig { out: cfg.out.join("base"), ..cfg.clone() })?;
                    (run.trainer, run.dataset)
                }
            };
            let evidence = DatasetEvidence::collect(&trainer.model, &ds, trainer.lambda())?;
            let vus_cfg = VusConfig::for_window(ds.window);
            for &a_cyc in &axes.first {
                for &a_ms in &axes.second {
                    let w = ScoreWeights { alpha_cyc: a_cyc, alpha_ms: a_ms, ..cfg.score };
                    w.validate()?;
                    let report = evidence.report(&ds.test_labels, &w, &vus_cfg)?;
                    table.push(vec![a_cyc.to_string(), a_ms.to_string()], report.metrics);
                }
            }
        }
    }
    std::fs::create_dir_all(&cfg.out).map_err(CliError::io(&cfg.out))?;
    table.save(&cfg.out.join(format!("sweep-{name}.tsv")))?;
    Ok(table)
}

fn as_count(v: f64, what: &str) -> CliResult<usize> {
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(CliError::Input(format!("{what} must be a positive integer, got {v}")))
    }
}

/// Generate a synthetic corpus and write it under `root/name` in the dataset layout.
pub fn synth(root: &Path, name: &str, length: usize, seed: u64) -> CliResult<PathBuf> {
    let spec = SynthConfig::with_length(length, seed);
    let mut ds = synth_generate(&spec)?;
    ds.name = name.to_string();
    let dir = write_dataset(root, &ds)?;
    let text = toml::to_string(&spec).map_err(|e| CliError::Input(e.to_string()))?;
    let path = dir.join("synth.toml");
    std::fs::write(&path, text).map_err(CliError::io(path))?;
    Ok(dir)
}
