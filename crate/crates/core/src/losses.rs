//! SmoothL1 and the multi-scale, cycle and cross-path objectives.

use ndarray::{ArrayBase, Data, Dimension};
use serde::{Deserialize, Serialize};

use crate::decoders::{CycleOutputs, MsOutputs};
use crate::error::{LeftError, Result};
use crate::spectral::{ScaleComponents, Spectrogram};
use crate::tape::{smooth_l1_scalar, Tape, Unary, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ms: f64,
    pub lambda_cyc: f64,
    pub lambda_cons: f64,
    /// `(ω_2, …, ω_K, ω_full)`, summing to one.
    pub omega: Vec<f64>,
}

impl LossWeights {
    /// Renormalizes `omega` onto the simplex.
    pub fn new(lambda_ms: f64, lambda_cyc: f64, lambda_cons: f64, omega: Vec<f64>) -> Result<Self> {
        for (name, v) in [("λ_ms", lambda_ms), ("λ_cyc", lambda_cyc), ("λ_cons", lambda_cons)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LeftError::invalid(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        let total: f64 = omega.iter().sum();
        if omega.is_empty() || omega.iter().any(|&w| !(w >= 0.0)) || !(total > 0.0) || !total.is_finite() {
            return Err(LeftError::invalid(format!("scale weights {omega:?} cannot be normalized")));
        }
        let omega = omega.into_iter().map(|w| w / total).collect();
        Ok(Self { lambda_ms, lambda_cyc, lambda_cons, omega })
    }

    /// Default λ = (1, 1, 0.1) with uniform ω over `bands - 1` supervised scales plus the full rate.
    pub fn uniform(bands: usize) -> Self {
        let n = bands.max(1);
        Self { lambda_ms: 1.0, lambda_cyc: 1.0, lambda_cons: 0.1, omega: vec![1.0 / n as f64; n] }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.omega.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(LeftError::invalid(format!("scale weights sum to {sum}, not 1")));
        }
        Self::new(self.lambda_ms, self.lambda_cyc, self.lambda_cons, self.omega.clone()).map(|_| ())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::uniform(3)
    }
}

/// Mean SmoothL1 with transition point 1.
pub fn smooth_l1<S1, S2, D>(a: &ArrayBase<S1, D>, b: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    if a.shape() != b.shape() {
        return Err(LeftError::invalid(format!("SmoothL1 of shapes {:?} and {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a.iter().zip(b.iter()).map(|(x, y)| smooth_l1_scalar(x - y)).sum();
    Ok(sum / a.len() as f64)
}

pub fn smooth_l1_on_tape(tape: &Tape, a: Var, b: Var) -> Var {
    tape.mean_all(tape.map(tape.sub(a, b), Unary::SmoothL1))
}

pub fn loss_ms(ms_out: &MsOutputs, targets: &ScaleComponents, x: &ndarray::Array2<f64>, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    let supervised = targets.components.len().saturating_sub(1);
    if ms_out.per_scale.len() != supervised || w.omega.len() != supervised + 1 {
        return Err(LeftError::invalid(format!(
            "{} scale outputs, {} supervised targets and {} weights",
            ms_out.per_scale.len(),
            supervised,
            w.omega.len()
        )));
    }
    let mut total = 0.0;
    for (k, out) in ms_out.per_scale.iter().enumerate() {
        total += w.omega[k] * smooth_l1(out, &targets.components[k + 1])?;
    }
    Ok(total + w.omega[supervised] * smooth_l1(&ms_out.full_rate, x)?)
}

pub fn loss_cyc(cyc: &CycleOutputs, x: &ndarray::Array2<f64>, s: &Spectrogram) -> Result<f64> {
    Ok(smooth_l1(&cyc.s_from_time.planes, &s.planes)? + smooth_l1(&cyc.x_from_freq, x)?)
}

pub fn loss_cons(ms_out: &MsOutputs, cyc: &CycleOutputs) -> Result<f64> {
    smooth_l1(&ms_out.full_rate, &cyc.x_from_freq)
}

/// `λ_ms·L_ms + λ_cyc·L_cyc + λ_cons·L_cons`.
pub fn total_loss(parts: [f64; 3], w: &LossWeights) -> f64 {
    w.lambda_ms * parts[0] + w.lambda_cyc * parts[1] + w.lambda_cons * parts[2]
}
