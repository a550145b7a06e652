//! Timestamp-level anomaly maps from cycle, multi-scale and cross-path disagreement.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::make_windows;
use crate::decoders::{CycleOutputs, MsOutputs};
use crate::error::{LeftError, Result};
use crate::model::{Inference, LeftModel};
use crate::prototypes::{js_evidence, uncertainty_gate};
use crate::spectral::ScaleComponents;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreWeights {
    pub alpha_cyc: f64,
    pub alpha_ms: f64,
    pub alpha_f: f64,
    pub alpha_t: f64,
    pub alpha_g: f64,
    pub alpha_c: f64,
    pub kappa: usize,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self { alpha_cyc: 0.5, alpha_ms: 0.5, alpha_f: 1.0, alpha_t: 1.0, alpha_g: 0.1, alpha_c: 0.5, kappa: 5 }
    }
}

impl ScoreWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha_cyc, self.alpha_ms, self.alpha_f, self.alpha_t, self.alpha_g, self.alpha_c];
        if all.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(LeftError::invalid(format!("score weights must be nonnegative, got {all:?}")));
        }
        if self.kappa.is_multiple_of(2) {
            return Err(LeftError::invalid(format!("smoothing window κ = {} must be odd", self.kappa)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub total: Array1<f64>,
    pub cycle_part: Array1<f64>,
    pub ms_part: Array1<f64>,
    pub cross_path: Array1<f64>,
}

impl AnomalyMap {
    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }
}

/// Centered mean over `κ` samples, window truncated at the edges.
pub fn moving_average(u: &Array1<f64>, kappa: usize) -> Result<Array1<f64>> {
    if kappa.is_multiple_of(2) || kappa == 0 {
        return Err(LeftError::invalid(format!("κ = {kappa} must be odd")));
    }
    if kappa > u.len() {
        return Err(LeftError::invalid(format!("κ = {kappa} exceeds length {}", u.len())));
    }
    let half = kappa / 2;
    let n = u.len();
    Ok((0..n)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(n);
            let s: f64 = u.slice(ndarray::s![lo..hi]).sum();
            s / (hi - lo) as f64
        })
        .collect())
}

fn channel_mean_abs(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array1<f64>> {
    if a.dim() != b.dim() {
        return Err(LeftError::shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok((a - b).mapv(f64::abs).mean_axis(Axis(1)).expect("at least one channel"))
}

/// `c(t)`: channel-mean `|X̂_ms − X̂_{←f}|`.
pub fn cross_path_discrepancy(ms_out: &MsOutputs, cyc: &CycleOutputs) -> Result<Array1<f64>> {
    channel_mean_abs(&ms_out.full_rate, &cyc.x_from_freq)
}

pub fn score_cycle(
    x: &Array2<f64>,
    cyc: &CycleOutputs,
    g: &Array1<f64>,
    c: &Array1<f64>,
    w: &ScoreWeights,
) -> Result<Array1<f64>> {
    w.validate()?;
    let delta_f = channel_mean_abs(&cyc.x_from_freq, x)?;
    let delta_t = channel_mean_abs(&cyc.x_hat, x)?;
    if g.len() != x.nrows() || c.len() != x.nrows() {
        return Err(LeftError::shape("gate or cross-path length differs from the window"));
    }
    let raw = delta_f * w.alpha_f + delta_t * w.alpha_t + g * w.alpha_g + c * w.alpha_c;
    moving_average(&raw, w.kappa)
}

/// Nearest-neighbour repetition by `factor`, cropped to `length`.
pub fn upsample_to(u: &Array1<f64>, factor: usize, length: usize) -> Array1<f64> {
    (0..length).map(|t| u[(t / factor).min(u.len() - 1)]).collect()
}

/// Full-rate error plus every supervised scale's error lifted to length T.
pub fn score_ms(ms_out: &MsOutputs, targets: &ScaleComponents, x: &Array2<f64>, factors: &[usize]) -> Result<Array1<f64>> {
    if factors.len() != targets.components.len() || ms_out.per_scale.len() + 1 != factors.len() {
        return Err(LeftError::invalid(format!(
            "{} factors, {} targets, {} scale outputs",
            factors.len(),
            targets.components.len(),
            ms_out.per_scale.len()
        )));
    }
    let t = x.nrows();
    let mut score = channel_mean_abs(&ms_out.full_rate, x)?;
    for (k, out) in ms_out.per_scale.iter().enumerate() {
        let e = channel_mean_abs(out, &targets.components[k + 1])?;
        score += &upsample_to(&e, factors[k + 1], t);
    }
    Ok(score)
}

/// `α_cyc·A_cyc + α_ms·A_ms`; `cross_path` is left at zero.
pub fn score_total(cycle: &Array1<f64>, ms: &Array1<f64>, w: &ScoreWeights) -> Result<AnomalyMap> {
    if cycle.len() != ms.len() {
        return Err(LeftError::shape(format!("cycle score of {} vs multi-scale score of {}", cycle.len(), ms.len())));
    }
    Ok(AnomalyMap {
        total: cycle * w.alpha_cyc + ms * w.alpha_ms,
        cycle_part: cycle.clone(),
        ms_part: ms.clone(),
        cross_path: Array1::zeros(cycle.len()),
    })
}

/// Score one window from its inference record.
pub fn score_inference(inf: &Inference, x: &Array2<f64>, factors: &[usize], w: &ScoreWeights) -> Result<AnomalyMap> {
    let gate = uncertainty_gate(&inf.p_t, &inf.p_f)?;
    let c = cross_path_discrepancy(&inf.ms, &inf.cycle)?;
    let cycle = score_cycle(x, &inf.cycle, &gate, &c, w)?;
    let ms = score_ms(&inf.ms, &inf.targets, x, factors)?;
    let mut map = score_total(&cycle, &ms, w)?;
    map.cross_path = c;
    Ok(map)
}

/// Per-window raw evidence, kept so score weights can be swept without rerunning the model.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowEvidence {
    pub offset: usize,
    pub delta_f: Array1<f64>,
    pub delta_t: Array1<f64>,
    pub gate: Array1<f64>,
    pub js: Array1<f64>,
    pub cross_path: Array1<f64>,
    pub ms: Array1<f64>,
}

impl WindowEvidence {
    pub fn from_inference(inf: &Inference, x: &Array2<f64>, offset: usize, factors: &[usize]) -> Result<Self> {
        Ok(Self {
            offset,
            delta_f: channel_mean_abs(&inf.cycle.x_from_freq, x)?,
            delta_t: channel_mean_abs(&inf.cycle.x_hat, x)?,
            gate: uncertainty_gate(&inf.p_t, &inf.p_f)?,
            js: js_evidence(&inf.p_t, &inf.p_f)?,
            cross_path: cross_path_discrepancy(&inf.ms, &inf.cycle)?,
            ms: score_ms(&inf.ms, &inf.targets, x, factors)?,
        })
    }

    pub fn score(&self, w: &ScoreWeights) -> Result<AnomalyMap> {
        let raw = &self.delta_f * w.alpha_f + &self.delta_t * w.alpha_t + &self.gate * w.alpha_g + &self.cross_path * w.alpha_c;
        let cycle = moving_average(&raw, w.kappa)?;
        let mut map = score_total(&cycle, &self.ms, w)?;
        map.cross_path = self.cross_path.clone();
        Ok(map)
    }
}

/// Raw evidence for a whole series, windowed at stride T with a right-aligned tail.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesEvidence {
    pub length: usize,
    pub windows: Vec<WindowEvidence>,
}

impl SeriesEvidence {
    pub fn collect(model: &LeftModel, series: &Array2<f64>, lambda: f64) -> Result<Self> {
        let t = model.config.length;
        let windows = make_windows(series, t, t, true)?
            .into_iter()
            .map(|(offset, x)| {
                let inf = model.infer(&x, lambda)?;
                WindowEvidence::from_inference(&inf, &x, offset, &model.config.factors)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { length: series.nrows(), windows })
    }

    /// Assemble a series map; overlapping timestamps take the later window's value.
    pub fn score(&self, w: &ScoreWeights) -> Result<AnomalyMap> {
        let n = self.length;
        let mut out = AnomalyMap {
            total: Array1::zeros(n),
            cycle_part: Array1::zeros(n),
            ms_part: Array1::zeros(n),
            cross_path: Array1::zeros(n),
        };
        for win in &self.windows {
            let m = win.score(w)?;
            let range = ndarray::s![win.offset..win.offset + m.len()];
            out.total.slice_mut(range).assign(&m.total);
            out.cycle_part.slice_mut(range).assign(&m.cycle_part);
            out.ms_part.slice_mut(range).assign(&m.ms_part);
            out.cross_path.slice_mut(range).assign(&m.cross_path);
        }
        Ok(out)
    }
}

pub fn score_series(model: &LeftModel, series: &Array2<f64>, lambda: f64, w: &ScoreWeights) -> Result<AnomalyMap> {
    SeriesEvidence::collect(model, series, lambda)?.score(w)
}
