//! Parameter storage and the small set of layers the model is built from.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tape::{Gradients, Mat, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter arrays. Values are shared with tapes through `Arc`.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Mat>>,
    frozen: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(Arc::new(value));
        self.frozen.push(false);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Mat) {
        assert_eq!(value.dim(), self.values[id.0].dim(), "shape of {}", self.names[id.0]);
        self.values[id.0] = Arc::new(value);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Frozen parameters enter the tape as constants and receive no updates.
    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn bind(&self, tape: &Tape) -> Bound {
        let vars = self
            .values
            .iter()
            .zip(&self.frozen)
            .map(|(v, &frozen)| {
                if frozen {
                    tape.constant_shared(Arc::clone(v))
                } else {
                    tape.leaf_shared(Arc::clone(v))
                }
            })
            .collect();
        Bound { vars, frozen: self.frozen.clone() }
    }
}

/// Parameters recorded on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    frozen: Vec<bool>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients per parameter, zero where none reached it.
    pub fn collect(&self, store: &ParamStore, grads: &mut Gradients) -> Vec<Mat> {
        store
            .ids()
            .map(|id| {
                let g = grads.take(self.vars[id.0]);
                match g {
                    Some(g) if !self.frozen[id.0] => g,
                    _ => Mat::zeros(store.get(id).dim()),
                }
            })
            .collect()
    }
}

/// Glorot-uniform initialization.
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(fan_in, fan_out, rng));
        let bias = store.add(format!("{name}.bias"), Mat::zeros((1, fan_out)));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        tape.add_row(tape.matmul(x, p.var(self.weight)), p.var(self.bias))
    }
}

/// Layer normalization over the feature axis with learned gain and shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Mat::ones((1, dim)));
        let shift = store.add(format!("{name}.shift"), Mat::zeros((1, dim)));
        Self { gain, shift }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        let n = tape.normalize_rows(x, LAYER_NORM_EPS);
        tape.add_row(tape.mul_row(n, p.var(self.gain)), p.var(self.shift))
    }
}

/// Two linear layers with a GELU in between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: (usize, usize, usize), rng: &mut impl Rng) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), dims.0, dims.1, rng),
            second: Linear::new(store, &format!("{name}.1"), dims.1, dims.2, rng),
        }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        let h = tape.gelu(self.first.forward(tape, p, x));
        self.second.forward(tape, p, h)
    }
}

/// Multi-head scaled dot-product attention with optional boolean mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads >= 1 && dim.is_multiple_of(heads), "d_model {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    /// `queries` (Lq×D) attend to `context` (Lk×D); `mask[i, j]` allows pair (i, j).
    pub fn forward(&self, tape: &Tape, p: &Bound, queries: Var, context: Var, mask: Option<&Array2<bool>>) -> Var {
        let q = self.query.forward(tape, p, queries);
        let k = self.key.forward(tape, p, context);
        let v = self.value.forward(tape, p, context);
        let dim = tape.shape(q).1;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var> = (0..self.heads)
            .map(|h| {
                let (a, b) = (h * dh, (h + 1) * dh);
                let qh = tape.slice_cols(q, a, b);
                let kh = tape.slice_cols(k, a, b);
                let vh = tape.slice_cols(v, a, b);
                let scores = tape.scale(tape.matmul_nt(qh, kh), scale);
                let weights = tape.softmax_rows(scores, mask);
                tape.matmul(weights, vh)
            })
            .collect();
        let joined = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        self.output.forward(tape, p, joined)
    }
}
