//! Prototype banks, soft assignments and the evidence derived from them.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::error::{LeftError, Result};
use crate::nn::{gaussian, Bound, ParamId, ParamStore};
use crate::tape::{Mat, Tape, Unary, Var};
use crate::tokenizers::TokenStream;

pub const DEFAULT_PROTOTYPES: usize = 16;
pub const DEFAULT_GAMMA: f64 = 10.0;
const COSINE_EPS: f64 = 1e-8;

/// `M×D` prototype matrix with softmax temperature γ.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub vectors: Array2<f64>,
    pub gamma: f64,
}

impl PrototypeBank {
    pub fn new(vectors: Array2<f64>, gamma: f64) -> Result<Self> {
        if vectors.nrows() < 2 {
            return Err(LeftError::invalid("a prototype bank needs at least two prototypes"));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(LeftError::NonFinite("prototype bank".into()));
        }
        if !(gamma >= 0.0) {
            return Err(LeftError::invalid(format!("temperature must be nonnegative, got {gamma}")));
        }
        Ok(Self { vectors, gamma })
    }

    /// Unit-Gaussian rows normalized to unit length.
    pub fn random(m: usize, d: usize, gamma: f64, rng: &mut impl Rng) -> Result<Self> {
        Self::new(unit_rows(gaussian(m, d, 1.0, rng)), gamma)
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }
}

fn unit_rows(mut m: Mat) -> Mat {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    m
}

/// Row-stochastic `length×M` assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMap {
    pub probs: Array2<f64>,
}

impl AssignmentMap {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for (i, row) in probs.rows().into_iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0)) || (row.sum() - 1.0).abs() > 1e-6 {
                return Err(LeftError::invalid(format!("assignment row {i} is not a distribution")));
            }
        }
        Ok(Self { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }

    pub fn prototypes(&self) -> usize {
        self.probs.ncols()
    }
}

/// Softmax over prototypes of `γ·cos(token, prototype)` on the tape.
/// Zero-norm tokens get cosine 0 with every prototype.
pub fn assign_on_tape(tape: &Tape, tokens: Var, bank: Var, gamma: f64) -> Var {
    let h = tape.l2_normalize_rows(tokens, COSINE_EPS);
    let p = tape.l2_normalize_rows(bank, COSINE_EPS);
    let cos = tape.matmul_nt(h, p);
    tape.softmax_rows(tape.scale(cos, gamma), None)
}

pub fn proto_assign(h: &TokenStream, bank: &PrototypeBank) -> Result<AssignmentMap> {
    if h.dim() != bank.vectors.ncols() {
        return Err(LeftError::invalid(format!(
            "token width {} does not match prototype width {}",
            h.dim(),
            bank.vectors.ncols()
        )));
    }
    let tape = Tape::new();
    let t = tape.constant(h.tokens.clone());
    let b = tape.constant(bank.vectors.clone());
    let p = assign_on_tape(&tape, t, b, bank.gamma);
    Ok(AssignmentMap { probs: tape.value(p).as_ref().clone() })
}

/// Align-corners linear interpolation matrix mapping `from` rows to `to` rows.
pub fn interpolation_matrix(from: usize, to: usize) -> Mat {
    let mut w = Mat::zeros((to, from));
    if from == 1 || to == 1 {
        w.column_mut(0).fill(1.0);
        if to == 1 && from > 1 {
            w.fill(0.0);
            w[[0, 0]] = 0.5;
            w[[0, from - 1]] += 0.5;
        }
        return w;
    }
    for i in 0..to {
        let pos = i as f64 * (from - 1) as f64 / (to - 1) as f64;
        let lo = (pos.floor() as usize).min(from - 2);
        let frac = pos - lo as f64;
        w[[i, lo]] += 1.0 - frac;
        w[[i, lo + 1]] += frac;
    }
    w
}

/// Interpolate then renormalize rows, on the tape.
pub fn align_on_tape(tape: &Tape, probs: Var, target: usize) -> Var {
    let from = tape.shape(probs).0;
    let w = tape.constant(interpolation_matrix(from, target));
    let interp = tape.matmul(w, probs);
    let sums = tape.map(tape.sum_rows(interp), Unary::Recip);
    tape.mul_col(interp, sums)
}

pub fn align_assignments(p_f: &AssignmentMap, target_length: usize) -> Result<AssignmentMap> {
    if target_length == 0 {
        return Err(LeftError::invalid("target length must be ≥ 1"));
    }
    if p_f.len() == target_length {
        return Ok(p_f.clone());
    }
    let tape = Tape::new();
    let p = tape.constant(p_f.probs.clone());
    let out = align_on_tape(&tape, p, target_length);
    Ok(AssignmentMap { probs: tape.value(out).as_ref().clone() })
}

fn entropy(p: ArrayView1<'_, f64>) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

/// Jensen–Shannon divergence (natural log) of two distributions.
pub fn js_divergence(p: ArrayView1<'_, f64>, q: ArrayView1<'_, f64>) -> f64 {
    let kl_to_mid = |a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>| -> f64 {
        a.iter()
            .zip(b.iter())
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &y)| x * (2.0 * x / (x + y)).ln())
            .sum()
    };
    (0.5 * (kl_to_mid(p, q) + kl_to_mid(q, p))).clamp(0.0, std::f64::consts::LN_2)
}

fn check_pair(a: &AssignmentMap, b: &AssignmentMap) -> Result<()> {
    if a.probs.dim() != b.probs.dim() {
        return Err(LeftError::shape(format!("assignments {:?} vs {:?}", a.probs.dim(), b.probs.dim())));
    }
    Ok(())
}

/// `d(t) = JS(p_t(t), p̃_f(t))`.
pub fn js_evidence(p_t: &AssignmentMap, p_f: &AssignmentMap) -> Result<Array1<f64>> {
    check_pair(p_t, p_f)?;
    Ok(p_t.probs.rows().into_iter().zip(p_f.probs.rows()).map(|(a, b)| js_divergence(a, b)).collect())
}

/// `g(t) = ½[H(p_t(t)) + H(p̃_f(t))] / ln M`.
pub fn uncertainty_gate(p_t: &AssignmentMap, p_f: &AssignmentMap) -> Result<Array1<f64>> {
    check_pair(p_t, p_f)?;
    let norm = (p_t.prototypes() as f64).ln();
    Ok(p_t
        .probs
        .rows()
        .into_iter()
        .zip(p_f.probs.rows())
        .map(|(a, b)| (0.5 * (entropy(a) + entropy(b)) / norm).clamp(0.0, 1.0))
        .collect())
}

/// `z_mem = mean_t(p) · P` on the tape; returns `1×D`.
pub fn memory_read_on_tape(tape: &Tape, probs: Var, bank: Var) -> Var {
    tape.matmul(tape.mean_cols(probs), bank)
}

pub fn memory_read(p: &AssignmentMap, bank: &PrototypeBank) -> Result<Array1<f64>> {
    if p.prototypes() != bank.len() {
        return Err(LeftError::shape(format!("{} assignment columns for {} prototypes", p.prototypes(), bank.len())));
    }
    let mean = p.probs.mean_axis(ndarray::Axis(0)).expect("nonempty assignments");
    Ok(mean.dot(&bank.vectors))
}

/// `(1-λ)·z + λ·z_mem` on the tape.
pub fn memory_mix_on_tape(tape: &Tape, z: Var, z_mem: Var, lambda: f64) -> Var {
    tape.add(tape.scale(z, 1.0 - lambda), tape.scale(z_mem, lambda))
}

pub fn memory_mix(z: ArrayView1<'_, f64>, z_mem: ArrayView1<'_, f64>, lambda: f64) -> Result<Array1<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(LeftError::invalid(format!("λ = {lambda} outside [0, 1]")));
    }
    if z.len() != z_mem.len() {
        return Err(LeftError::shape("latent and memory widths differ"));
    }
    Ok(&z * (1.0 - lambda) + &z_mem * lambda)
}

/// Time and frequency prototype banks as trainable parameters.
#[derive(Debug, Clone, Copy)]
pub struct PrototypeParams {
    pub time: ParamId,
    pub freq: ParamId,
    pub gamma: f64,
}

impl PrototypeParams {
    pub fn new(store: &mut ParamStore, m: usize, d: usize, gamma: f64, rng: &mut impl Rng) -> Self {
        let time = store.add("proto.time", unit_rows(gaussian(m, d, 1.0, rng)));
        let freq = store.add("proto.freq", unit_rows(gaussian(m, d, 1.0, rng)));
        Self { time, freq, gamma }
    }

    pub fn bank(&self, store: &ParamStore, id: ParamId) -> PrototypeBank {
        PrototypeBank { vectors: store.get(id).clone(), gamma: self.gamma }
    }

    pub fn vars(&self, p: &Bound) -> (Var, Var) {
        (p.var(self.time), p.var(self.freq))
    }
}

/// Shared, immutable handle to an interpolation matrix cache entry.
pub fn shared_interpolation(from: usize, to: usize) -> Arc<Mat> {
    Arc::new(interpolation_matrix(from, to))
}
