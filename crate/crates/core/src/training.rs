//! Adam training with the memory-mixing curriculum, early stopping and checkpoints.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{LeftError, Result};
use crate::losses::LossWeights;
use crate::model::{LeftModel, ModelConfig};
use crate::nn::ParamStore;
use crate::tape::{Mat, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Curriculum {
    pub start: f64,
    pub end: f64,
    pub ramp_fraction: f64,
}

impl Default for Curriculum {
    fn default() -> Self {
        Self { start: 0.0, end: 0.5, ramp_fraction: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub curriculum: Curriculum,
    pub loss_weights: LossWeights,
    pub patience: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 128,
            epochs: 20,
            seed: 0,
            curriculum: Curriculum::default(),
            loss_weights: LossWeights::default(),
            patience: 5,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(LeftError::invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(LeftError::invalid("batch size must be ≥ 1"));
        }
        let c = self.curriculum;
        if !(0.0..=1.0).contains(&c.ramp_fraction) || !(0.0..=1.0).contains(&c.start) || !(0.0..=1.0).contains(&c.end) {
            return Err(LeftError::invalid("curriculum endpoints and ramp fraction must lie in [0, 1]"));
        }
        self.loss_weights.validate()
    }
}

/// Memory-mixing weight at `step` of `total`.
pub fn lambda_schedule(step: u64, total: u64, cfg: &TrainConfig) -> f64 {
    let c = cfg.curriculum;
    let ramp = c.ramp_fraction * total as f64;
    if ramp <= 0.0 || step as f64 >= ramp {
        return c.end;
    }
    c.start + (c.end - c.start) * step as f64 / ramp
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub ms: f64,
    pub cyc: f64,
    pub cons: f64,
    pub total: f64,
}

impl LossRecord {
    fn add(&mut self, other: &LossRecord) {
        self.ms += other.ms;
        self.cyc += other.cyc;
        self.cons += other.cons;
        self.total += other.total;
    }

    fn scaled(self, k: f64) -> LossRecord {
        LossRecord { ms: self.ms * k, cyc: self.cyc * k, cons: self.cons * k, total: self.total * k }
    }

    fn check_finite(&self) -> Result<()> {
        for (name, v) in [("L_ms", self.ms), ("L_cyc", self.cyc), ("L_cons", self.cons), ("total loss", self.total)] {
            if !v.is_finite() {
                return Err(LeftError::NonFinite(name.into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossRecord,
    pub validation: LossRecord,
    pub lambda: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.ids().map(|id| Mat::zeros(store.get(id).dim())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros }
    }

    /// One update with bias correction; `step` counts from 1.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Mat], lr: f64, step: u64) {
        let c1 = 1.0 - self.beta1.powi(step as i32);
        let c2 = 1.0 - self.beta2.powi(step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.is_frozen(id) {
                continue;
            }
            let i = id.0;
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            ndarray::Zip::from(&mut self.m[i]).and(&mut self.v[i]).and(&grads[i]).for_each(|m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
            });
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(&self.m[i]).and(&self.v[i]).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}

/// Mutable training state around one model.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: LeftModel,
    pub config: TrainConfig,
    pub adam: Adam,
    pub step: u64,
    pub epoch: usize,
    pub total_steps: u64,
    pub best_validation: f64,
    pub stale_epochs: usize,
    pub log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(model: LeftModel, config: TrainConfig, steps_per_epoch: usize) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&model.store);
        let total_steps = (config.epochs * steps_per_epoch.max(1)) as u64;
        Ok(Self {
            model,
            config,
            adam,
            step: 0,
            epoch: 0,
            total_steps,
            best_validation: f64::INFINITY,
            stale_epochs: 0,
            log: Vec::new(),
        })
    }

    fn weights(&self) -> LossWeights {
        self.model.config.ablation.effective_weights(&self.config.loss_weights)
    }

    pub fn lambda(&self) -> f64 {
        lambda_schedule(self.step.min(self.total_steps), self.total_steps, &self.config)
    }

    /// Batch-mean losses and gradients at the current parameters.
    pub fn loss_and_gradients(&self, batch: &[Array2<f64>]) -> Result<(LossRecord, Vec<Mat>)> {
        if batch.is_empty() {
            return Err(LeftError::invalid("empty batch"));
        }
        let lambda = self.lambda();
        let w = self.weights();
        let store = &self.model.store;
        let mut grads: Vec<Mat> = store.ids().map(|id| Mat::zeros(store.get(id).dim())).collect();
        let mut record = LossRecord::default();
        for x in batch {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let f = self.model.forward(&tape, &p, x, lambda, &w)?;
            let r = LossRecord {
                ms: tape.scalar(f.l_ms),
                cyc: tape.scalar(f.l_cyc),
                cons: tape.scalar(f.l_cons),
                total: tape.scalar(f.total),
            };
            r.check_finite()?;
            record.add(&r);
            let mut g = tape.backward(f.total);
            for (acc, gi) in grads.iter_mut().zip(p.collect(store, &mut g)) {
                *acc += &gi;
            }
        }
        let k = 1.0 / batch.len() as f64;
        for (id, g) in store.ids().zip(grads.iter_mut()) {
            g.mapv_inplace(|v| v * k);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(LeftError::NonFinite(format!("gradient of {}", store.name(id))));
            }
        }
        Ok((record.scaled(k), grads))
    }

    /// One Adam step on `batch`; returns the pre-update batch losses.
    pub fn train_step(&mut self, batch: &[Array2<f64>]) -> Result<LossRecord> {
        let (record, grads) = self.loss_and_gradients(batch)?;
        self.step += 1;
        self.adam.update(&mut self.model.store, &grads, self.config.learning_rate, self.step);
        Ok(record)
    }

    /// Mean losses over `windows` without updating.
    pub fn evaluate(&self, windows: &[Array2<f64>]) -> Result<LossRecord> {
        if windows.is_empty() {
            return Ok(LossRecord::default());
        }
        let lambda = self.lambda();
        let w = self.weights();
        let mut sum = LossRecord::default();
        for x in windows {
            let inf = self.model.infer(x, lambda)?;
            let [ms, cyc, cons] = inf.losses;
            let total = crate::losses::total_loss(inf.losses, &w);
            sum.add(&LossRecord { ms, cyc, cons, total });
        }
        let r = sum.scaled(1.0 / windows.len() as f64);
        r.check_finite()?;
        Ok(r)
    }

    /// Window order of one epoch, fixed by `(seed, epoch)`.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
    }

    /// Run one epoch; returns its log row.
    pub fn run_epoch(&mut self, train: &[Array2<f64>], validation: &[Array2<f64>]) -> Result<EpochLog> {
        let started = Instant::now();
        let order = self.epoch_order(train.len(), self.epoch);
        let mut sum = LossRecord::default();
        let mut batches = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<Array2<f64>> = chunk.iter().map(|&i| train[i].clone()).collect();
            sum.add(&self.train_step(&batch)?);
            batches += 1;
        }
        let validation = self.evaluate(validation)?;
        self.epoch += 1;
        let row = EpochLog {
            epoch: self.epoch,
            train: sum.scaled(1.0 / batches.max(1) as f64),
            validation,
            lambda: self.lambda(),
            seconds: started.elapsed().as_secs_f64(),
        };
        self.log.push(row);
        Ok(row)
    }

    /// Train until `epochs` or early stopping; keeps the best-validation parameters.
    pub fn fit(&mut self, train: &[Array2<f64>], validation: &[Array2<f64>]) -> Result<Vec<EpochLog>> {
        if train.is_empty() {
            return Err(LeftError::invalid("no training windows"));
        }
        let dir = self.config.checkpoint_dir.clone();
        if let Some(d) = &dir {
            std::fs::create_dir_all(d)?;
        }
        let mut best_store = self.model.store.clone();
        while self.epoch < self.config.epochs {
            let row = self.run_epoch(train, validation)?;
            let score = if validation.is_empty() { row.train.total } else { row.validation.total };
            let improved = score < self.best_validation;
            if improved {
                self.best_validation = score;
                self.stale_epochs = 0;
                best_store = self.model.store.clone();
            } else {
                self.stale_epochs += 1;
            }
            if let Some(d) = &dir {
                self.checkpoint().save(&d.join(format!("epoch-{:03}.ckpt", self.epoch)))?;
                if improved {
                    self.checkpoint().save(&d.join("best.ckpt"))?;
                }
            }
            log::info!(
                "epoch {} train {:.5} val {:.5} ({:.1}s)",
                row.epoch,
                row.train.total,
                row.validation.total,
                row.seconds
            );
            if self.stale_epochs >= self.config.patience {
                log::info!("early stop after {} stale epochs", self.stale_epochs);
                break;
            }
        }
        self.model.store = best_store;
        Ok(self.log.clone())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let store = &self.model.store;
        Checkpoint {
            model: self.model.config.clone(),
            train: self.config.clone(),
            step: self.step,
            epoch: self.epoch,
            best_validation: self.best_validation,
            stale_epochs: self.stale_epochs,
            names: store.names().to_vec(),
            params: store.ids().map(|id| store.get(id).clone()).collect(),
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
        }
    }

    /// Rebuild a trainer from a checkpoint; `steps_per_epoch` must match the original run.
    pub fn from_checkpoint(ckpt: &Checkpoint, steps_per_epoch: usize) -> Result<Self> {
        let model = model_from_checkpoint(ckpt)?;
        let mut t = Trainer::new(model, ckpt.train.clone(), steps_per_epoch)?;
        t.adam.m = ckpt.adam_m.clone();
        t.adam.v = ckpt.adam_v.clone();
        t.step = ckpt.step;
        t.epoch = ckpt.epoch;
        t.best_validation = ckpt.best_validation;
        t.stale_epochs = ckpt.stale_epochs;
        Ok(t)
    }
}

/// Instantiate the architecture from the config snapshot and load parameters by name.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<LeftModel> {
    let mut model = LeftModel::new(ckpt.model.clone(), 0)?;
    load_params(&mut model.store, &ckpt.names, &ckpt.params)?;
    Ok(model)
}

fn load_params(store: &mut ParamStore, names: &[String], params: &[Array2<f64>]) -> Result<()> {
    if names.len() != store.len() {
        return Err(LeftError::Checkpoint(format!("{} arrays for a model with {} parameters", names.len(), store.len())));
    }
    for (name, value) in names.iter().zip(params) {
        let id = store.find(name).ok_or_else(|| LeftError::Checkpoint(format!("unknown parameter {name}")))?;
        if store.get(id).dim() != value.dim() {
            return Err(LeftError::Checkpoint(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                value.dim(),
                store.get(id).dim()
            )));
        }
        store.set(id, value.clone());
    }
    Ok(())
}

/// Train a fresh model; returns the trainer (with best parameters restored) and its log.
pub fn fit(
    model_config: ModelConfig,
    config: TrainConfig,
    train: &[Array2<f64>],
    validation: &[Array2<f64>],
) -> Result<Trainer> {
    let model = LeftModel::new(model_config, config.seed)?;
    let steps = train.len().div_ceil(config.batch_size.max(1));
    let mut trainer = Trainer::new(model, config, steps)?;
    trainer.fit(train, validation)?;
    Ok(trainer)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gaussian;

    fn small_model(seed: u64) -> LeftModel {
        let mut cfg = ModelConfig::new(64, 1);
        cfg.encoder.d_model = 8;
        cfg.encoder.heads = 2;
        cfg.encoder.ms_encoder_depth = 1;
        cfg.fusion.d_model = 8;
        cfg.fusion.heads = 2;
        cfg.prototypes = 4;
        LeftModel::new(cfg, seed).unwrap()
    }

    fn windows(n: usize, seed: u64) -> Vec<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let noise = gaussian(64, 1, 0.05, &mut rng);
                Array2::from_shape_fn((64, 1), |(t, _)| ((t + 3 * i) as f64 * 0.3).sin()) + noise
            })
            .collect()
    }

    fn cfg() -> TrainConfig {
        TrainConfig { learning_rate: 3e-3, batch_size: 2, epochs: 3, seed: 9, ..TrainConfig::default() }
    }

    #[test]
    fn schedule_examples() {
        let c = TrainConfig { curriculum: Curriculum { start: 0.2, end: 0.6, ramp_fraction: 0.5 }, ..cfg() };
        assert_eq!(lambda_schedule(0, 100, &c), 0.2);
        assert_eq!(lambda_schedule(50, 100, &c), 0.6);
        assert_eq!(lambda_schedule(90, 100, &c), 0.6);
        assert!((lambda_schedule(25, 100, &c) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { learning_rate: 0.0, ..cfg() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..cfg() }.validate().is_err());
        let bad = Curriculum { ramp_fraction: 1.5, ..Curriculum::default() };
        assert!(TrainConfig { curriculum: bad, ..cfg() }.validate().is_err());
    }

    #[test]
    fn step_records_are_consistent_and_deterministic() {
        let data = windows(2, 0);
        let mut a = Trainer::new(small_model(1), cfg(), 1).unwrap();
        let mut b = Trainer::new(small_model(1), cfg(), 1).unwrap();
        let ra = a.train_step(&data).unwrap();
        let rb = b.train_step(&data).unwrap();
        assert_eq!(ra, rb);
        let w = a.weights();
        assert!(ra.ms >= 0.0 && ra.cyc >= 0.0 && ra.cons >= 0.0);
        assert!((ra.total - crate::losses::total_loss([ra.ms, ra.cyc, ra.cons], &w)).abs() < 1e-9);
        assert!(a.train_step(&[]).is_err());
    }

    #[test]
    fn repeated_steps_halve_the_loss() {
        let data = windows(2, 1);
        let mut t = Trainer::new(small_model(2), cfg(), 1).unwrap();
        let first = t.train_step(&data).unwrap().total;
        let mut last = first;
        for _ in 0..199 {
            last = t.train_step(&data).unwrap().total;
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let data = windows(4, 2);
        let val = windows(2, 3);
        let steps = data.len().div_ceil(2);

        let mut straight = Trainer::new(small_model(3), cfg(), steps).unwrap();
        straight.run_epoch(&data, &val).unwrap();
        let path = dir.path().join("mid.ckpt");
        let ckpt = straight.checkpoint();
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        straight.run_epoch(&data, &val).unwrap();

        let mut resumed = Trainer::from_checkpoint(&loaded, steps).unwrap();
        resumed.run_epoch(&data, &val).unwrap();
        for id in straight.model.store.ids() {
            assert_eq!(straight.model.store.get(id), resumed.model.store.get(id), "{}", straight.model.store.name(id));
        }
        assert_eq!(straight.log[1].train, resumed.log[0].train);
    }

    #[test]
    fn fit_writes_checkpoints_and_log_rows() {
        let dir = tempfile::tempdir().unwrap();
        let data = windows(4, 4);
        let val = windows(2, 5);
        let config = TrainConfig { checkpoint_dir: Some(dir.path().to_path_buf()), ..cfg() };
        let t = fit(small_model(4).config.clone(), config, &data, &val).unwrap();
        assert_eq!(t.log.len(), 3);
        assert!(dir.path().join("best.ckpt").exists());
        assert!(dir.path().join("epoch-003.ckpt").exists());
        assert!(t.log.iter().all(|r| r.seconds >= 0.0 && r.validation.total.is_finite()));
    }

    #[test]
    fn checkpoint_rejects_mismatched_architecture() {
        let t = Trainer::new(small_model(5), cfg(), 1).unwrap();
        let mut ckpt = t.checkpoint();
        ckpt.params[0] = Array2::zeros((1, 1));
        assert!(matches!(model_from_checkpoint(&ckpt), Err(LeftError::Checkpoint(_))));
    }
}
