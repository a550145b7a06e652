//! Threshold-free metrics (AUC, range-AUC, VUS), SPOT thresholds and point-wise F1.
//!
//! The range-aware metrics soften labels around each anomalous range: a point at
//! distance `d ≤ ℓ` outside a range gets weight `sqrt(1 - d/(ℓ+1))`, overlapping
//! contributions combine by maximum.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{LeftError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScores {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(LeftError::invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(LeftError::invalid("labels must be 0 or 1"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(LeftError::NonFinite("scores".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VusConfig {
    pub max_buffer: usize,
    pub buffer_steps: usize,
}

impl VusConfig {
    /// `ℓ_max = T/4` with 16 buffer steps.
    pub fn for_window(t: usize) -> Self {
        Self { max_buffer: t / 4, buffer_steps: 16 }
    }

    /// Buffer sizes integrated over: every integer when the grid is fine enough,
    /// otherwise `buffer_steps` evenly spaced rounded points.
    pub fn buffers(&self) -> Vec<usize> {
        let l = self.max_buffer;
        if self.buffer_steps > l || self.buffer_steps < 2 {
            return (0..=l).collect();
        }
        let mut out: Vec<usize> = (0..self.buffer_steps)
            .map(|i| (i as f64 * l as f64 / (self.buffer_steps - 1) as f64).round() as usize)
            .collect();
        out.dedup();
        out
    }
}

fn ranges(labels: &[u8]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &l) in labels.iter().enumerate() {
        match (l, start) {
            (1, None) => start = Some(i),
            (0, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, labels.len()));
    }
    out
}

/// Soft labels within `buffer` of each anomalous range.
pub fn range_labels(labels: &[u8], buffer: usize) -> Vec<f64> {
    let n = labels.len();
    let mut soft: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    if buffer == 0 {
        return soft;
    }
    for (s, e) in ranges(labels) {
        for d in 1..=buffer {
            let w = (1.0 - d as f64 / (buffer + 1) as f64).sqrt();
            if let Some(i) = s.checked_sub(d) {
                soft[i] = soft[i].max(w);
            }
            if e - 1 + d < n {
                soft[e - 1 + d] = soft[e - 1 + d].max(w);
            }
        }
    }
    soft
}

/// ROC and PR areas against soft labels.
///
/// A prediction on a point with label `y` earns `y` true positives; predictions on
/// points inside a buffer (`0 < y`) are never false positives. Recall is normalized
/// by the margin `(P + Σy)/2` and capped at 1, false positives by the count of hard
/// negatives (`y = 0`). Thresholds run over the distinct scores; ROC is a trapezoid
/// from (0, 0) to (1, 1) and PR a right-endpoint step sum.
pub fn weighted_auc(scores: &[f64], labels: &[u8], soft: &[f64]) -> Result<(f64, f64)> {
    let hard: f64 = labels.iter().map(|&l| l as f64).sum();
    let margin = (hard + soft.iter().sum::<f64>()) / 2.0;
    let negatives = soft.iter().filter(|&&y| y == 0.0).count() as f64;
    if hard == 0.0 || negatives == 0.0 {
        return Err(LeftError::UndefinedMetric("both classes must be present".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0.0, 0.0);
    let (mut roc, mut pr) = (0.0, 0.0);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            let y = soft[idx[i]];
            tp += y;
            if y == 0.0 {
                fp += 1.0;
            }
            i += 1;
        }
        let tpr = (tp / margin).min(1.0);
        let fpr = fp / negatives;
        roc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        if tp + fp > 0.0 {
            pr += (tpr - prev_tpr) * tp / (tp + fp);
        }
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    roc += (1.0 - prev_fpr) * (1.0 + prev_tpr) / 2.0;
    Ok((roc, pr))
}

pub fn auc_roc(ls: &LabeledScores) -> Result<f64> {
    Ok(range_auc(ls, 0)?.0)
}

pub fn auc_pr(ls: &LabeledScores) -> Result<f64> {
    Ok(range_auc(ls, 0)?.1)
}

/// `(roc, pr)` on labels softened within `buffer`.
pub fn range_auc(ls: &LabeledScores, buffer: usize) -> Result<(f64, f64)> {
    weighted_auc(&ls.scores, &ls.labels, &range_labels(&ls.labels, buffer))
}

/// Volume under the range-AUC surfaces across buffer sizes, normalized by `ℓ_max`.
pub fn vus(ls: &LabeledScores, cfg: &VusConfig) -> Result<(f64, f64)> {
    let buffers = cfg.buffers();
    let values: Vec<(f64, f64)> = buffers.iter().map(|&l| range_auc(ls, l)).collect::<Result<_>>()?;
    if cfg.max_buffer == 0 {
        return Ok(values[0]);
    }
    let (mut roc, mut pr) = (0.0, 0.0);
    for i in 1..buffers.len() {
        let w = (buffers[i] - buffers[i - 1]) as f64 / 2.0;
        roc += w * (values[i].0 + values[i - 1].0);
        pr += w * (values[i].1 + values[i - 1].1);
    }
    let l = cfg.max_buffer as f64;
    Ok((roc / l, pr / l))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpotThreshold {
    pub threshold: f64,
    /// Initial high quantile the tail is fitted above.
    pub initial: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub peaks: usize,
    /// The tail was degenerate and the empirical quantile was returned.
    pub fallback: bool,
}

pub const SPOT_INITIAL_LEVEL: f64 = 0.98;
pub const SPOT_RISK: f64 = 1e-3;

fn empirical_quantile(sorted: &[f64], level: f64) -> f64 {
    let pos = level * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn gpd_log_likelihood(y: &[f64], gamma: f64, sigma: f64) -> f64 {
    let n = y.len() as f64;
    if !(sigma > 0.0) {
        return f64::NEG_INFINITY;
    }
    if gamma.abs() < 1e-12 {
        return -n * sigma.ln() - y.iter().sum::<f64>() / sigma;
    }
    let mut s = 0.0;
    for &v in y {
        let z = 1.0 + gamma * v / sigma;
        if z <= 0.0 {
            return f64::NEG_INFINITY;
        }
        s += z.ln();
    }
    -n * sigma.ln() - (1.0 + 1.0 / gamma) * s
}

/// Grimshaw's reduction: roots of `u(θ)·v(θ) = 1` give the GPD maximum-likelihood candidates.
fn grimshaw(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let (ymin, ymax) = y.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    let w = |theta: f64| {
        let u = y.iter().map(|&v| 1.0 / (1.0 + theta * v)).sum::<f64>() / n;
        let v = 1.0 + y.iter().map(|&v| (1.0 + theta * v).ln()).sum::<f64>() / n;
        u * v - 1.0
    };
    let mut candidates = vec![0.0];
    let eps = 1e-8 / mean.max(1e-300);
    let mut intervals = vec![(-1.0 / ymax + eps, -eps)];
    if ymin > 0.0 {
        intervals.push((eps, 2.0 * (mean - ymin) / (mean * ymin)));
    }
    for (a, b) in intervals {
        if !(b > a) {
            continue;
        }
        let steps = 200;
        let grid: Vec<f64> = (0..=steps).map(|i| a + (b - a) * i as f64 / steps as f64).collect();
        for pair in grid.windows(2) {
            let (mut lo, mut hi) = (pair[0], pair[1]);
            let (mut flo, fhi) = (w(lo), w(hi));
            if !(flo.is_finite() && fhi.is_finite()) || flo * fhi > 0.0 {
                continue;
            }
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                let fm = w(mid);
                if flo * fm <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                    flo = fm;
                }
            }
            candidates.push(0.5 * (lo + hi));
        }
    }
    let mut best = (0.0, mean);
    let mut best_ll = gpd_log_likelihood(y, 0.0, mean);
    for &theta in &candidates[1..] {
        let gamma = y.iter().map(|&v| (1.0 + theta * v).ln()).sum::<f64>() / n;
        let sigma = gamma / theta;
        let ll = gpd_log_likelihood(y, gamma, sigma);
        if ll > best_ll {
            best_ll = ll;
            best = (gamma, sigma);
        }
    }
    best
}

/// Peaks-over-threshold level with exceedance probability `q`.
pub fn spot_threshold(calibration: &[f64], q: f64) -> Result<SpotThreshold> {
    spot_threshold_with(calibration, q, SPOT_INITIAL_LEVEL)
}

pub fn spot_threshold_with(calibration: &[f64], q: f64, initial_level: f64) -> Result<SpotThreshold> {
    if calibration.len() < 100 {
        return Err(LeftError::invalid(format!("SPOT needs ≥ 100 calibration scores, got {}", calibration.len())));
    }
    if !(q > 0.0 && q < 1.0) || !(initial_level > 0.0 && initial_level < 1.0) {
        return Err(LeftError::invalid("risk and initial level must lie in (0, 1)"));
    }
    if calibration.iter().any(|v| !v.is_finite()) {
        return Err(LeftError::NonFinite("calibration scores".into()));
    }
    let mut sorted = calibration.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let t = empirical_quantile(&sorted, initial_level);
    let peaks: Vec<f64> = sorted.iter().filter(|&&v| v > t).map(|&v| v - t).collect();
    if peaks.is_empty() || peaks.iter().all(|&p| p <= 0.0) {
        return Ok(SpotThreshold {
            threshold: empirical_quantile(&sorted, 1.0 - q),
            initial: t,
            gamma: 0.0,
            sigma: 0.0,
            peaks: 0,
            fallback: true,
        });
    }
    let nt = peaks.len() as f64;
    let (gamma, sigma) = grimshaw(&peaks);
    let ratio = q * n / nt;
    let threshold = if ratio >= 1.0 {
        t
    } else if gamma.abs() < 1e-12 {
        t - sigma * ratio.ln()
    } else {
        t + sigma / gamma * (ratio.powf(-gamma) - 1.0)
    };
    Ok(SpotThreshold { threshold, initial: t, gamma, sigma, peaks: peaks.len(), fallback: false })
}

/// Point-wise F1 and accuracy with `score ≥ threshold` predicted anomalous.
pub fn f1_accuracy(ls: &LabeledScores, threshold: f64) -> (f64, f64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in ls.scores.iter().zip(&ls.labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
    let acc = if ls.is_empty() { 0.0 } else { (tp + tn) as f64 / ls.len() as f64 };
    (f1, acc)
}

/// Named metric values, rendered as `key = value` lines.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable(pub BTreeMap<String, f64>);

impl MetricTable {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.0.get(key).copied()
    }

    pub fn insert(&mut self, key: &str, value: f64) {
        self.0.insert(key.to_string(), value);
    }
}

impl fmt::Display for MetricTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.0 {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// All reported metrics; `threshold` is used for F1 and accuracy.
pub fn evaluate(ls: &LabeledScores, cfg: &VusConfig, threshold: f64) -> Result<MetricTable> {
    let (vus_roc, vus_pr) = vus(ls, cfg)?;
    let (auc_r, auc_p) = range_auc(ls, 0)?;
    let (r_roc, r_pr) = range_auc(ls, cfg.max_buffer)?;
    let (f1, acc) = f1_accuracy(ls, threshold);
    let mut t = MetricTable::default();
    for (k, v) in [
        ("vus_roc", vus_roc),
        ("vus_pr", vus_pr),
        ("auc_roc", auc_r),
        ("auc_pr", auc_p),
        ("range_auc_roc", r_roc),
        ("range_auc_pr", r_pr),
        ("f1", f1),
        ("accuracy", acc),
        ("threshold", threshold),
    ] {
        t.insert(k, v);
    }
    Ok(t)
}
