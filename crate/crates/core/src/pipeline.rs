//! Train-then-evaluate glue shared by the command line and the acceptance suite.

use ndarray::Array2;

use crate::data::{training_windows, SeriesDataset};
use crate::error::Result;
use crate::metrics::{evaluate, spot_threshold, LabeledScores, MetricTable, SpotThreshold, VusConfig, SPOT_RISK};
use crate::model::{LeftModel, ModelConfig};
use crate::scoring::{AnomalyMap, ScoreWeights, SeriesEvidence};
use crate::training::{fit, TrainConfig, Trainer};

/// Training and validation windows at the dataset's window length and stride.
pub fn dataset_windows(ds: &SeriesDataset) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)> {
    let train = training_windows(&ds.train, ds.window, ds.stride)?;
    let validation = if ds.validation.nrows() >= ds.window {
        training_windows(&ds.validation, ds.window, ds.stride)?
    } else {
        Vec::new()
    };
    Ok((train, validation))
}

/// Model configuration sized to `ds`.
pub fn model_config_for(ds: &SeriesDataset) -> ModelConfig {
    ModelConfig::new(ds.window, ds.channels())
}

pub fn train_on(ds: &SeriesDataset, model: ModelConfig, train: TrainConfig) -> Result<Trainer> {
    let (tw, vw) = dataset_windows(ds)?;
    fit(model, train, &tw, &vw)
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metrics: MetricTable,
    pub test: AnomalyMap,
    pub spot: SpotThreshold,
}

/// Evidence on the validation (threshold calibration) and test splits.
#[derive(Debug, Clone)]
pub struct DatasetEvidence {
    pub validation: Option<SeriesEvidence>,
    pub test: SeriesEvidence,
}

impl DatasetEvidence {
    pub fn collect(model: &LeftModel, ds: &SeriesDataset, lambda: f64) -> Result<Self> {
        let validation = if ds.validation.nrows() >= model.config.length {
            Some(SeriesEvidence::collect(model, &ds.validation, lambda)?)
        } else {
            None
        };
        Ok(Self { validation, test: SeriesEvidence::collect(model, &ds.test, lambda)? })
    }

    /// Metrics for one score weighting. The SPOT threshold is fitted on validation
    /// scores, or on the test scores themselves when there is no validation split.
    pub fn report(&self, labels: &[u8], w: &ScoreWeights, vus_cfg: &VusConfig) -> Result<EvalReport> {
        let test = self.test.score(w)?;
        let calibration = match &self.validation {
            Some(v) => v.score(w)?.total.to_vec(),
            None => test.total.to_vec(),
        };
        let spot = spot_threshold(&calibration, SPOT_RISK)?;
        let ls = LabeledScores::new(test.total.to_vec(), labels.to_vec())?;
        let metrics = evaluate(&ls, vus_cfg, spot.threshold)?;
        Ok(EvalReport { metrics, test, spot })
    }
}

pub fn evaluate_model(model: &LeftModel, ds: &SeriesDataset, lambda: f64, w: &ScoreWeights) -> Result<EvalReport> {
    DatasetEvidence::collect(model, ds, lambda)?.report(&ds.test_labels, w, &VusConfig::for_window(ds.window))
}
