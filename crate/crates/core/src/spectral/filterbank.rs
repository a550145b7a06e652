//! Learnable band-split filterbank with Nyquist-feasible edges.
//!
//! Edges are built by the monotone recursion
//! `e_k = e_{k-1} + (c_k - e_{k-1}) * sigmoid(u_k)` with `c_k = 1 / (2 r_k)`,
//! so every band stays below the cutoff of its own downsampling factor.
//! Soft masks are differences of tempered sigmoids, normalized to a partition
//! on the covered band, applied to the real FFT of the reflect-extended
//! signal, and the band outputs are decimated by `r_k`.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::fft::{irfft, rfft, rfft_len};
use super::stft::reflect_index;
use crate::error::{LeftError, Result};
use crate::tape::{sigmoid, BandSpectrum, Mat, Tape, Unary, Var};

pub const DEFAULT_TAU: f64 = 0.01;
pub const DEFAULT_EPS: f64 = 1e-8;
pub const DEFAULT_EXTENSION: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterbankState {
    /// Unconstrained edge parameters, one per band.
    pub u: Vec<f64>,
    /// Downsampling factors, coarse to fine.
    pub r: Vec<usize>,
    pub tau: f64,
    pub eps: f64,
    /// Reflect-padding length applied on each side before the FFT.
    pub extension: usize,
}

impl FilterbankState {
    /// State with `u = 0` and default temperature.
    pub fn new(r: Vec<usize>) -> Result<Self> {
        let u = vec![0.0; r.len()];
        Self::with_params(u, r, DEFAULT_TAU)
    }

    pub fn with_params(u: Vec<f64>, r: Vec<usize>, tau: f64) -> Result<Self> {
        let state = Self { u, r, tau, eps: DEFAULT_EPS, extension: DEFAULT_EXTENSION };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        if self.u.len() != self.r.len() {
            return Err(LeftError::invalid(format!(
                "{} edge parameters for {} bands",
                self.u.len(),
                self.r.len()
            )));
        }
        nyquist_cutoffs(&self.r)?;
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(LeftError::invalid(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(self.eps > 0.0) {
            return Err(LeftError::invalid("eps must be positive"));
        }
        if self.u.iter().any(|v| !v.is_finite()) {
            return Err(LeftError::NonFinite("filterbank edge parameters".into()));
        }
        Ok(())
    }

    pub fn bands(&self) -> usize {
        self.r.len()
    }

    pub fn cutoffs(&self) -> Vec<f64> {
        self.r.iter().map(|&r| 0.5 / r as f64).collect()
    }

    /// Copy with new edge parameters.
    pub fn with_u(&self, u: Vec<f64>) -> Result<Self> {
        let next = Self { u, ..self.clone() };
        next.validate()?;
        Ok(next)
    }

    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        let next = Self { tau, ..self.clone() };
        next.validate()?;
        Ok(next)
    }

    /// Length of the boundary-extended signal for a window of length `t`.
    pub fn extended_length(&self, t: usize) -> usize {
        t + 2 * self.extension
    }

    /// Lengths `T_k = ceil(T / r_k)`.
    pub fn scale_lengths(&self, t: usize) -> Vec<usize> {
        self.r.iter().map(|&r| t.div_ceil(r)).collect()
    }
}

/// `c_k = 1 / (2 r_k)` for factors ordered coarse to fine.
pub fn nyquist_cutoffs(r: &[usize]) -> Result<Vec<f64>> {
    if r.is_empty() {
        return Err(LeftError::invalid("at least one downsampling factor is required"));
    }
    if r.contains(&0) {
        return Err(LeftError::invalid("downsampling factors must be ≥ 1"));
    }
    if r.windows(2).any(|w| w[0] < w[1]) {
        return Err(LeftError::invalid(format!("downsampling factors {r:?} are not nonincreasing")));
    }
    Ok(r.iter().map(|&r| 0.5 / r as f64).collect())
}

/// Edges `e_0 = 0 ≤ e_1 ≤ … ≤ e_K` with `e_k ≤ c_k`.
pub fn learned_edges(state: &FilterbankState) -> Vec<f64> {
    let mut edges = Vec::with_capacity(state.bands() + 1);
    edges.push(0.0);
    let mut prev = 0.0;
    for (c, &u) in state.cutoffs().into_iter().zip(&state.u) {
        // Clamp guards against rounding pushing the edge past its cutoff.
        let e = (prev + (c - prev) * sigmoid(u)).clamp(prev, c);
        edges.push(e);
        prev = e;
    }
    edges
}

/// One-sided normalized frequency grid `j / n` for `j = 0..=n/2`.
pub fn frequency_grid(n: usize) -> Vec<f64> {
    (0..rfft_len(n)).map(|j| j as f64 / n as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandMasks {
    /// Normalized masks `K×F`.
    pub values: Array2<f64>,
    /// Unnormalized masks `K×F`.
    pub raw: Array2<f64>,
    pub edges: Vec<f64>,
    pub grid: Vec<f64>,
}

impl BandMasks {
    pub fn bands(&self) -> usize {
        self.values.nrows()
    }

    /// `Σ_k m_k(f)` before normalization.
    pub fn coverage(&self) -> Vec<f64> {
        self.raw.columns().into_iter().map(|c| c.sum()).collect()
    }

    /// `Σ_k m̃_k(f)`.
    pub fn partition_sum(&self) -> Vec<f64> {
        self.values.columns().into_iter().map(|c| c.sum()).collect()
    }
}

/// `sigmoid((f - lo)/τ) - sigmoid((f - hi)/τ)` without cancellation:
/// it equals `sigmoid((f - lo)/τ) · sigmoid((hi - f)/τ) · (1 - exp(-(hi - lo)/τ))`.
fn band_mask_value(f: f64, lo: f64, hi: f64, tau: f64) -> f64 {
    sigmoid((f - lo) / tau) * sigmoid((hi - f) / tau) * -(-(hi - lo) / tau).exp_m1()
}

/// Soft masks `m_k(f) = s(f - e_{k-1}) - s(f - e_k)`, `s(x) = sigmoid(x / (τ + ε))`.
pub fn band_masks(edges: &[f64], tau: f64, grid: &[f64]) -> Result<BandMasks> {
    band_masks_with_eps(edges, tau, grid, DEFAULT_EPS)
}

pub fn band_masks_with_eps(edges: &[f64], tau: f64, grid: &[f64], eps: f64) -> Result<BandMasks> {
    if edges.len() < 2 {
        return Err(LeftError::invalid("band masks need at least two edges"));
    }
    if edges.windows(2).any(|w| w[1] < w[0]) {
        return Err(LeftError::invalid(format!("edges {edges:?} are not monotone")));
    }
    if !(tau > 0.0) {
        return Err(LeftError::invalid(format!("temperature must be positive, got {tau}")));
    }
    let k = edges.len() - 1;
    let raw = Array2::from_shape_fn((k, grid.len()), |(b, j)| {
        let f = grid[j];
        band_mask_value(f, edges[b], edges[b + 1], tau + eps)
    });
    let mut values = raw.clone();
    for (j, mut col) in values.columns_mut().into_iter().enumerate() {
        let total = raw.column(j).sum() + eps;
        col.mapv_inplace(|m| m / total);
    }
    Ok(BandMasks { values, raw, edges: edges.to_vec(), grid: grid.to_vec() })
}

/// Masks of `state` on the grid of a boundary-extended window of length `t`.
pub fn masks_for_length(state: &FilterbankState, t: usize) -> Result<BandMasks> {
    let grid = frequency_grid(state.extended_length(t));
    band_masks_with_eps(&learned_edges(state), state.tau, &grid, state.eps)
}

/// Out-of-cutoff mask mass `ε_k = Σ_{f > c_k} m̃_k(f)`.
pub fn aliasing_leakage(masks: &BandMasks, cutoffs: &[f64], k: usize) -> Result<f64> {
    if k >= masks.bands() || k >= cutoffs.len() {
        return Err(LeftError::Index { index: k, len: masks.bands().min(cutoffs.len()) });
    }
    Ok(masks
        .grid
        .iter()
        .zip(masks.values.row(k))
        .filter(|(f, _)| **f > cutoffs[k])
        .map(|(_, m)| m)
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleComponents {
    /// Band `k` decimated by `r_k`, shape `ceil(T/r_k)×C`.
    pub components: Vec<Array2<f64>>,
    /// `ε_k` per band.
    pub leakages: Vec<f64>,
}

/// Reflect-extension gather indices for a `t×c` window.
fn extension_indices(t: usize, c: usize, ext: usize) -> Vec<Option<usize>> {
    let n = t + 2 * ext;
    let mut idx = Vec::with_capacity(n * c);
    for i in 0..n {
        let src = reflect_index(i as isize - ext as isize, t);
        for ch in 0..c {
            idx.push(Some(src * c + ch));
        }
    }
    idx
}

/// Decimation gather: row `i` takes row `i·r` of a `t×c` input, zero past the end.
fn decimation_indices(t: usize, c: usize, r: usize) -> Vec<Option<usize>> {
    let tk = t.div_ceil(r);
    let mut idx = Vec::with_capacity(tk * c);
    for i in 0..tk {
        for ch in 0..c {
            idx.push((i * r < t).then_some(i * r * c + ch));
        }
    }
    idx
}

/// Tape nodes produced by [`decompose_on_tape`].
#[derive(Debug, Clone)]
pub struct TapeBands {
    /// Decimated components `X^(k)`.
    pub components: Vec<Var>,
    /// Cropped full-rate band signals before decimation.
    pub full_rate: Vec<Var>,
    /// Normalized masks, each `1×F`.
    pub masks: Vec<Var>,
}

/// Differentiable band decomposition of `x` (T×C) with edge parameters `u` (1×K).
pub fn decompose_on_tape(tape: &Tape, x: Var, u: Var, state: &FilterbankState) -> Result<TapeBands> {
    let (t, c) = tape.shape(x);
    let k = state.bands();
    if t < *state.r.iter().max().unwrap_or(&1) {
        return Err(LeftError::invalid(format!(
            "window length {t} is shorter than the largest downsampling factor"
        )));
    }
    if tape.shape(u) != (1, k) {
        return Err(LeftError::shape(format!("edge parameters {:?}, expected (1, {k})", tape.shape(u))));
    }
    let ext = state.extension;
    let n = state.extended_length(t);
    let grid = frequency_grid(n);
    let bins = grid.len();
    let grid_row = tape.constant(Mat::from_shape_vec((1, bins), grid).expect("grid row"));
    let inv_tau = 1.0 / (state.tau + state.eps);

    let mut edges = vec![tape.constant(Mat::zeros((1, 1)))];
    for (b, cut) in state.cutoffs().into_iter().enumerate() {
        let prev = edges[b];
        let uk = tape.slice_cols(u, b, b + 1);
        let gate = tape.sigmoid(uk);
        let room = tape.add_scalar(tape.scale(prev, -1.0), cut);
        edges.push(tape.add(prev, tape.mul(room, gate)));
    }
    // Rising and falling tempered steps at every edge, combined in the
    // cancellation-free product form of `band_mask_value`.
    let rising: Vec<Var> = edges
        .iter()
        .map(|&e| {
            let shifted = tape.sub(grid_row, tape.broadcast(e, (1, bins)));
            tape.sigmoid(tape.scale(shifted, inv_tau))
        })
        .collect();
    let falling: Vec<Var> = edges
        .iter()
        .map(|&e| {
            let shifted = tape.sub(tape.broadcast(e, (1, bins)), grid_row);
            tape.sigmoid(tape.scale(shifted, inv_tau))
        })
        .collect();
    let raw: Vec<Var> = (0..k)
        .map(|b| {
            let width = tape.scale(tape.sub(edges[b + 1], edges[b]), inv_tau);
            let gain = tape.map(width, Unary::OneMinusExpNeg);
            let m = tape.mul(rising[b], falling[b + 1]);
            tape.mul(m, tape.broadcast(gain, (1, bins)))
        })
        .collect();
    let mut total = raw[0];
    for &m in &raw[1..] {
        total = tape.add(total, m);
    }
    let denom = tape.add_scalar(total, state.eps);
    let masks: Vec<Var> = raw.iter().map(|&m| tape.div(m, denom)).collect();

    let extended = tape.gather(x, Arc::new(extension_indices(t, c, ext)), (n, c));
    let xv = tape.value(extended);
    let mut re = Vec::with_capacity(c);
    let mut im = Vec::with_capacity(c);
    for ch in 0..c {
        let (r, i) = rfft(&xv.column(ch).to_vec());
        re.push(r);
        im.push(i);
    }
    let spectrum = Arc::new(BandSpectrum { len: n, re, im });

    let mut components = Vec::with_capacity(k);
    let mut full_rate = Vec::with_capacity(k);
    for (b, &mask) in masks.iter().enumerate() {
        let filtered = tape.band_filter(extended, Arc::clone(&spectrum), mask);
        let cropped = tape.slice_rows(filtered, ext, ext + t);
        let r = state.r[b];
        let tk = t.div_ceil(r);
        components.push(tape.gather(cropped, Arc::new(decimation_indices(t, c, r)), (tk, c)));
        full_rate.push(cropped);
    }
    Ok(TapeBands { components, full_rate, masks })
}

/// Band components `X^(k)` of `x` with per-band leakage.
pub fn band_decompose_downsample(x: ArrayView2<'_, f64>, state: &FilterbankState) -> Result<ScaleComponents> {
    state.validate()?;
    let tape = Tape::new();
    let xv = tape.constant(x.to_owned());
    let uv = tape.constant(Mat::from_shape_vec((1, state.bands()), state.u.clone()).expect("u row"));
    let bands = decompose_on_tape(&tape, xv, uv, state)?;
    let masks = masks_for_length(state, x.nrows())?;
    let cutoffs = state.cutoffs();
    let leakages = (0..state.bands())
        .map(|k| aliasing_leakage(&masks, &cutoffs, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScaleComponents {
        components: bands.components.iter().map(|&v| tape.value(v).as_ref().clone()).collect(),
        leakages,
    })
}

/// Cropped full-rate band signals (before decimation).
pub fn band_components_full_rate(x: ArrayView2<'_, f64>, state: &FilterbankState) -> Result<Vec<Array2<f64>>> {
    state.validate()?;
    let tape = Tape::new();
    let xv = tape.constant(x.to_owned());
    let uv = tape.constant(Mat::from_shape_vec((1, state.bands()), state.u.clone()).expect("u row"));
    let bands = decompose_on_tape(&tape, xv, uv, state)?;
    Ok(bands.full_rate.iter().map(|&v| tape.value(v).as_ref().clone()).collect())
}

/// Reflect-extension of `x` by `ext` rows on each side.
pub fn reflect_extend(x: ArrayView2<'_, f64>, ext: usize) -> Array2<f64> {
    let (t, c) = x.dim();
    Array2::from_shape_fn((t + 2 * ext, c), |(i, ch)| x[[reflect_index(i as isize - ext as isize, t), ch]])
}

/// Aliasing energy of one band: the decimated part of the band component
/// that comes from spectral content above the post-decimation Nyquist `1/(2r)`.
///
/// `extended` is the boundary-extended signal (N×C) and `mask` a one-sided
/// mask on its `j/N` grid; the band component is cropped to rows
/// `ext..ext + t`, right zero-padded to `r·ceil(t/r)` and decimated from
/// index 0. The returned value is the L2 norm over all channels.
pub fn aliasing_energy(extended: ArrayView2<'_, f64>, mask: &[f64], ext: usize, t: usize, r: usize) -> f64 {
    let (n, c) = extended.dim();
    let cut = 0.5 / r as f64;
    let mut total = 0.0;
    for ch in 0..c {
        let (mut re, mut im) = rfft(&extended.column(ch).to_vec());
        for f in 0..re.len() {
            let keep = f as f64 / n as f64 > cut;
            let m = if keep { mask[f] } else { 0.0 };
            re[f] *= m;
            im[f] *= m;
        }
        let high = irfft(&re, &im, n);
        total += (0..t).step_by(r).map(|i| high[ext + i].powi(2)).sum::<f64>();
    }
    total.sqrt()
}

/// Exact aliasing energy `‖Δ_{r_k}(X^(k))‖₂` of band `k` of `x`.
pub fn aliasing_energy_oracle(x: ArrayView2<'_, f64>, state: &FilterbankState, k: usize) -> Result<f64> {
    if k >= state.bands() {
        return Err(LeftError::Index { index: k, len: state.bands() });
    }
    state.validate()?;
    let t = x.nrows();
    let masks = masks_for_length(state, t)?;
    let extended = reflect_extend(x, state.extension);
    let mask = masks.values.row(k).to_vec();
    Ok(aliasing_energy(extended.view(), &mask, state.extension, t, state.r[k]))
}
