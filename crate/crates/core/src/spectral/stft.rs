//! Short-time Fourier analysis and weighted overlap-add synthesis.
//!
//! Frames are taken from the reflect-padded signal (when `center_pad` is set)
//! with the taper centred inside each `fft_size` frame. Synthesis divides the
//! overlap-added, re-tapered frames by the summed squared taper, so
//! `stft_inverse(stft_forward(x)) == x` whenever that sum is positive on the
//! cropped support.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Array4, ArrayView2};
use serde::{Deserialize, Serialize};

use super::fft::{irfft, rfft, rfft_len};
use crate::error::{LeftError, Result};
use crate::tape::{Mat, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Periodic Hann taper.
    Hann,
    Rectangular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub window_kind: WindowKind,
    pub center_pad: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_length: 64,
            hop: 16,
            fft_size: 64,
            window_kind: WindowKind::Hann,
            center_pad: true,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_length == 0 || self.hop == 0 {
            return Err(LeftError::invalid("window_length and hop must be positive"));
        }
        if self.hop > self.window_length {
            return Err(LeftError::invalid(format!(
                "hop {} exceeds window_length {}",
                self.hop, self.window_length
            )));
        }
        if self.fft_size < self.window_length {
            return Err(LeftError::invalid(format!(
                "fft_size {} is shorter than window_length {}",
                self.fft_size, self.window_length
            )));
        }
        // Overlap-add condition: squared taper sums are positive at every hop phase.
        let w = self.window();
        for phase in 0..self.hop {
            let total: f64 = w.iter().skip(phase).step_by(self.hop).map(|v| v * v).sum();
            if total <= 1e-10 {
                return Err(LeftError::invalid(format!(
                    "window/hop pair leaves phase {phase} uncovered"
                )));
            }
        }
        if self.center_pad && self.fft_size / 2 < self.hop {
            return Err(LeftError::invalid("center padding shorter than hop"));
        }
        Ok(())
    }

    /// Taper of length `fft_size`, zero outside the centred `window_length` span.
    pub fn window(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.fft_size];
        let offset = (self.fft_size - self.window_length) / 2;
        for n in 0..self.window_length {
            w[offset + n] = match self.window_kind {
                WindowKind::Hann => 0.5 - 0.5 * (2.0 * PI * n as f64 / self.window_length as f64).cos(),
                WindowKind::Rectangular => 1.0,
            };
        }
        w
    }

    pub fn bins(&self) -> usize {
        rfft_len(self.fft_size)
    }

    pub fn pad(&self) -> usize {
        if self.center_pad {
            self.fft_size / 2
        } else {
            0
        }
    }

    /// Number of frames for a signal of length `t`.
    pub fn frames(&self, t: usize) -> usize {
        let padded = t + 2 * self.pad();
        if padded < self.fft_size {
            0
        } else {
            1 + (padded - self.fft_size) / self.hop
        }
    }
}

/// Complex STFT stored as real/imaginary planes `C×2×F×T_F`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub planes: Array4<f64>,
    pub config: StftConfig,
    pub origin_length: usize,
}

impl Spectrogram {
    pub fn zeros(config: StftConfig, channels: usize, origin_length: usize) -> Self {
        let planes = Array4::zeros((channels, 2, config.bins(), config.frames(origin_length)));
        Self { planes, config, origin_length }
    }

    pub fn channels(&self) -> usize {
        self.planes.dim().0
    }

    pub fn bins(&self) -> usize {
        self.planes.dim().2
    }

    pub fn frames(&self) -> usize {
        self.planes.dim().3
    }

    /// Matrix layout used on the tape: rows `f·T_F + frame`, columns
    /// `part·C + channel` with part 0 real and 1 imaginary.
    pub fn to_tape_layout(&self) -> Mat {
        let (c, _, f, tf) = self.planes.dim();
        Mat::from_shape_fn((f * tf, 2 * c), |(row, col)| {
            let (part, ch) = (col / c, col % c);
            self.planes[[ch, part, row / tf, row % tf]]
        })
    }

    pub fn from_tape_layout(m: &Mat, config: StftConfig, origin_length: usize) -> Result<Self> {
        let f = config.bins();
        let tf = config.frames(origin_length);
        if m.nrows() != f * tf || !m.ncols().is_multiple_of(2) {
            return Err(LeftError::shape(format!(
                "tape spectrogram {:?} does not match {f} bins × {tf} frames",
                m.dim()
            )));
        }
        let c = m.ncols() / 2;
        let planes = Array4::from_shape_fn((c, 2, f, tf), |(ch, part, bin, frame)| {
            m[[bin * tf + frame, part * c + ch]]
        });
        Ok(Self { planes, config, origin_length })
    }

    pub fn l2_norm(&self) -> f64 {
        self.planes.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Mirror an out-of-range index back into `0..n` (edge sample not repeated).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Analysis transform `S = W(x)`.
pub fn stft_forward(x: ArrayView2<'_, f64>, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let (t, channels) = x.dim();
    if t < cfg.window_length {
        return Err(LeftError::invalid(format!(
            "window of length {t} is shorter than the STFT window {}",
            cfg.window_length
        )));
    }
    let w = cfg.window();
    let pad = cfg.pad() as isize;
    let frames = cfg.frames(t);
    let bins = cfg.bins();
    let mut planes = Array4::zeros((channels, 2, bins, frames));
    let mut frame = vec![0.0; cfg.fft_size];
    for c in 0..channels {
        for m in 0..frames {
            let start = (m * cfg.hop) as isize - pad;
            for (n, slot) in frame.iter_mut().enumerate() {
                *slot = w[n] * x[[reflect_index(start + n as isize, t), c]];
            }
            let (re, im) = rfft(&frame);
            for f in 0..bins {
                planes[[c, 0, f, m]] = re[f];
                planes[[c, 1, f, m]] = im[f];
            }
        }
    }
    Ok(Spectrogram { planes, config: *cfg, origin_length: t })
}

/// Synthesis transform `x = W⁻¹(S)` by weighted overlap-add.
pub fn stft_inverse(s: &Spectrogram) -> Result<Array2<f64>> {
    let cfg = &s.config;
    cfg.validate()?;
    let t = s.origin_length;
    let (channels, parts, bins, frames) = s.planes.dim();
    if parts != 2 || bins != cfg.bins() || frames != cfg.frames(t) {
        return Err(LeftError::invalid(format!(
            "planes {:?} inconsistent with {} bins × {} frames",
            s.planes.dim(),
            cfg.bins(),
            cfg.frames(t)
        )));
    }
    let w = cfg.window();
    let pad = cfg.pad();
    let padded = t + 2 * pad;
    let wsum = squared_window_sum(cfg, padded, frames, &w);
    let mut out = Array2::zeros((t, channels));
    let mut acc = vec![0.0; padded];
    for c in 0..channels {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for m in 0..frames {
            let re: Vec<f64> = (0..bins).map(|f| s.planes[[c, 0, f, m]]).collect();
            let im: Vec<f64> = (0..bins).map(|f| s.planes[[c, 1, f, m]]).collect();
            let y = irfft(&re, &im, cfg.fft_size);
            let start = m * cfg.hop;
            for n in 0..cfg.fft_size {
                if start + n < padded {
                    acc[start + n] += w[n] * y[n];
                }
            }
        }
        for i in 0..t {
            let d = wsum[pad + i];
            out[[i, c]] = if d > 1e-10 { acc[pad + i] / d } else { 0.0 };
        }
    }
    Ok(out)
}

fn squared_window_sum(cfg: &StftConfig, padded: usize, frames: usize, w: &[f64]) -> Vec<f64> {
    let mut wsum = vec![0.0; padded];
    for m in 0..frames {
        let start = m * cfg.hop;
        for n in 0..cfg.fft_size {
            if start + n < padded {
                wsum[start + n] += w[n] * w[n];
            }
        }
    }
    wsum
}

/// Dense matrices of the analysis and synthesis maps for a fixed length, in
/// the tape layout of [`Spectrogram::to_tape_layout`].
#[derive(Debug, Clone)]
pub struct StftOperator {
    pub config: StftConfig,
    pub length: usize,
    /// `(F·T_F)×T` real part of the analysis map.
    pub analysis_re: Arc<Mat>,
    pub analysis_im: Arc<Mat>,
    /// `T×(F·T_F)` synthesis from the real plane.
    pub synthesis_re: Arc<Mat>,
    pub synthesis_im: Arc<Mat>,
}

impl StftOperator {
    pub fn new(config: StftConfig, length: usize) -> Result<Self> {
        config.validate()?;
        let rows = config.bins() * config.frames(length);
        let mut analysis_re = Mat::zeros((rows, length));
        let mut analysis_im = Mat::zeros((rows, length));
        let mut impulse = Array2::zeros((length, 1));
        for j in 0..length {
            impulse[[j, 0]] = 1.0;
            let spec = stft_forward(impulse.view(), &config)?.to_tape_layout();
            analysis_re.column_mut(j).assign(&spec.column(0));
            analysis_im.column_mut(j).assign(&spec.column(1));
            impulse[[j, 0]] = 0.0;
        }
        let mut synthesis_re = Mat::zeros((length, rows));
        let mut synthesis_im = Mat::zeros((length, rows));
        let mut unit = Mat::zeros((rows, 2));
        for r in 0..rows {
            for part in 0..2 {
                unit[[r, part]] = 1.0;
                let s = Spectrogram::from_tape_layout(&unit, config, length)?;
                let y = stft_inverse(&s)?;
                let target = if part == 0 { &mut synthesis_re } else { &mut synthesis_im };
                target.column_mut(r).assign(&y.column(0));
                unit[[r, part]] = 0.0;
            }
        }
        Ok(Self {
            config,
            length,
            analysis_re: Arc::new(analysis_re),
            analysis_im: Arc::new(analysis_im),
            synthesis_re: Arc::new(synthesis_re),
            synthesis_im: Arc::new(synthesis_im),
        })
    }

    pub fn frames(&self) -> usize {
        self.config.frames(self.length)
    }

    pub fn rows(&self) -> usize {
        self.analysis_re.nrows()
    }

    /// Analysis on the tape: T×C signal to `(F·T_F)×2C` tape spectrogram.
    pub fn forward(&self, tape: &Tape, x: Var) -> Var {
        let are = tape.constant_shared(Arc::clone(&self.analysis_re));
        let aim = tape.constant_shared(Arc::clone(&self.analysis_im));
        let re = tape.matmul(are, x);
        let im = tape.matmul(aim, x);
        tape.concat_cols(&[re, im])
    }

    /// Synthesis on the tape: `(F·T_F)×2C` tape spectrogram to T×C signal.
    pub fn inverse(&self, tape: &Tape, s: Var) -> Var {
        let c = tape.shape(s).1 / 2;
        let re = tape.slice_cols(s, 0, c);
        let im = tape.slice_cols(s, c, 2 * c);
        let bre = tape.constant_shared(Arc::clone(&self.synthesis_re));
        let bim = tape.constant_shared(Arc::clone(&self.synthesis_im));
        let a = tape.matmul(bre, re);
        let b = tape.matmul(bim, im);
        tape.add(a, b)
    }

    /// Exact frame bounds `(A, B)`: extreme eigenvalues of `WᵀW`.
    pub fn frame_bounds(&self) -> (f64, f64) {
        let gram = self.analysis_re.t().dot(&*self.analysis_re) + self.analysis_im.t().dot(&*self.analysis_im);
        let n = gram.nrows();
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| gram[[i, j]]);
        let eig = nalgebra::SymmetricEigen::new(m);
        let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}
