//! Time, frequency and multi-scale token encoders.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LeftError, Result};
use crate::nn::{gaussian, Attention, Bound, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::spectral::Spectrogram;
use crate::tape::{Mat, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Time,
    Frequency,
    Multiscale,
}

/// `length×D` tokens of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    pub tokens: Array2<f64>,
    pub view: View,
    /// Tokens per scale, coarse to fine (multi-scale view only).
    pub scale_lengths: Option<Vec<usize>>,
}

impl TokenStream {
    pub fn new(tokens: Array2<f64>, view: View) -> Self {
        Self { tokens, view, scale_lengths: None }
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub time_kernels: [usize; 3],
    pub freq_kernel: [usize; 2],
    /// Hidden channels of the two frequency convolutions.
    pub freq_channels: usize,
    /// Patch length per scale, coarse to fine.
    pub patch_lengths: Vec<usize>,
    pub ms_encoder_depth: usize,
    pub heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            time_kernels: [5, 3, 1],
            freq_kernel: [3, 3],
            freq_channels: 16,
            patch_lengths: vec![8, 8, 8],
            ms_encoder_depth: 2,
            heads: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, scales: usize) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(LeftError::invalid(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.time_kernels.iter().chain(&self.freq_kernel).any(|&k| k % 2 == 0) {
            return Err(LeftError::invalid("kernel sizes must be odd to preserve length"));
        }
        if self.patch_lengths.len() != scales {
            return Err(LeftError::invalid(format!(
                "{} patch lengths for {scales} scales",
                self.patch_lengths.len()
            )));
        }
        if self.patch_lengths.contains(&0) {
            return Err(LeftError::invalid("patch lengths must be ≥ 1"));
        }
        if self.freq_channels == 0 {
            return Err(LeftError::invalid("freq_channels must be ≥ 1"));
        }
        Ok(())
    }
}

/// Gather indices turning a `t×cin` matrix into same-padded `t×(k·cin)` columns.
pub fn conv1d_indices(t: usize, cin: usize, k: usize) -> Vec<Option<usize>> {
    let pad = (k / 2) as isize;
    let mut idx = Vec::with_capacity(t * k * cin);
    for row in 0..t as isize {
        for j in 0..k as isize {
            let src = row + j - pad;
            for c in 0..cin {
                idx.push((0..t as isize).contains(&src).then(|| src as usize * cin + c));
            }
        }
    }
    idx
}

/// Same as [`conv1d_indices`] for a `(rows·cols)×cin` grid stored row index
/// `r·cols + c`, with a `kr×kc` kernel.
pub fn conv2d_indices(rows: usize, cols: usize, cin: usize, kr: usize, kc: usize) -> Vec<Option<usize>> {
    let (pr, pc) = ((kr / 2) as isize, (kc / 2) as isize);
    let mut idx = Vec::with_capacity(rows * cols * kr * kc * cin);
    for r in 0..rows as isize {
        for c in 0..cols as isize {
            for a in 0..kr as isize {
                for b in 0..kc as isize {
                    let (sr, sc) = (r + a - pr, c + b - pc);
                    let inside = (0..rows as isize).contains(&sr) && (0..cols as isize).contains(&sc);
                    for ch in 0..cin {
                        idx.push(inside.then(|| (sr as usize * cols + sc as usize) * cin + ch));
                    }
                }
            }
        }
    }
    idx
}

#[derive(Debug, Clone)]
struct Conv {
    linear: Linear,
    indices: Arc<Vec<Option<usize>>>,
    rows: usize,
}

impl Conv {
    fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        let cols = self.linear.fan_in;
        let patches = tape.gather(x, Arc::clone(&self.indices), (self.rows, cols));
        self.linear.forward(tape, p, patches)
    }
}

/// Length-preserving 1D convolution stack over time. A learned per-timestep
/// embedding enters before the first activation, so pooled tokens keep phase.
#[derive(Debug, Clone)]
pub struct TimeEncoder {
    layers: Vec<Conv>,
    positions: ParamId,
}

impl TimeEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, t: usize, channels: usize, rng: &mut impl Rng) -> Self {
        let mut cin = channels;
        let layers = cfg
            .time_kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let linear = Linear::new(store, &format!("time.conv{i}"), k * cin, cfg.d_model, rng);
                let indices = Arc::new(conv1d_indices(t, cin, k));
                cin = cfg.d_model;
                Conv { linear, indices, rows: t }
            })
            .collect();
        let positions = store.add("time.pos", gaussian(t, cfg.d_model, 0.5, rng));
        Self { layers, positions }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        let last = self.layers.len() - 1;
        self.layers.iter().enumerate().fold(x, |h, (i, conv)| {
            let mut y = conv.forward(tape, p, h);
            if i == 0 {
                y = tape.add(y, p.var(self.positions));
            }
            if i < last {
                tape.gelu(y)
            } else {
                y
            }
        })
    }

    pub fn encode(&self, store: &ParamStore, x: ArrayView2<'_, f64>) -> TokenStream {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let xv = tape.constant(x.to_owned());
        let h = self.forward(&tape, &p, xv);
        TokenStream::new(tape.value(h).as_ref().clone(), View::Time)
    }
}

/// Two 2D convolutions over (bin, frame) with the 2C real/imaginary planes as
/// input channels, mean pooling over bins, then a projection to D.
#[derive(Debug, Clone)]
pub struct FreqEncoder {
    first: Conv,
    second: Conv,
    proj: Linear,
    pool: Arc<Mat>,
}

impl FreqEncoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        bins: usize,
        frames: usize,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let [kr, kc] = cfg.freq_kernel;
        let hidden = cfg.freq_channels;
        let rows = bins * frames;
        let first = Conv {
            linear: Linear::new(store, "freq.conv0", kr * kc * 2 * channels, hidden, rng),
            indices: Arc::new(conv2d_indices(bins, frames, 2 * channels, kr, kc)),
            rows,
        };
        let second = Conv {
            linear: Linear::new(store, "freq.conv1", kr * kc * hidden, hidden, rng),
            indices: Arc::new(conv2d_indices(bins, frames, hidden, kr, kc)),
            rows,
        };
        let proj = Linear::new(store, "freq.proj", hidden, cfg.d_model, rng);
        let mut pool = Mat::zeros((frames, rows));
        for f in 0..bins {
            for m in 0..frames {
                pool[[m, f * frames + m]] = 1.0 / bins as f64;
            }
        }
        Self { first, second, proj, pool: Arc::new(pool) }
    }

    /// `spec` is a tape-layout spectrogram `(F·T_F)×2C`.
    pub fn forward(&self, tape: &Tape, p: &Bound, spec: Var) -> Var {
        let h = tape.gelu(self.first.forward(tape, p, spec));
        let h = tape.gelu(self.second.forward(tape, p, h));
        let pooled = tape.matmul(tape.constant_shared(Arc::clone(&self.pool)), h);
        self.proj.forward(tape, p, pooled)
    }

    pub fn encode(&self, store: &ParamStore, s: &Spectrogram) -> TokenStream {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let sv = tape.constant(s.to_tape_layout());
        let h = self.forward(&tape, &p, sv);
        TokenStream::new(tape.value(h).as_ref().clone(), View::Frequency)
    }
}

/// Gather indices flattening `t×c` into `ceil(t/p)×(p·c)` patches, zero padded.
pub fn patch_indices(t: usize, c: usize, p: usize) -> Vec<Option<usize>> {
    let l = t.div_ceil(p);
    let mut idx = Vec::with_capacity(l * p * c);
    for i in 0..l {
        for j in 0..p {
            let src = i * p + j;
            for ch in 0..c {
                idx.push((src < t).then_some(src * c + ch));
            }
        }
    }
    idx
}

/// Linear projection of flattened patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchTokenizer {
    pub patch_length: usize,
    pub channels: usize,
    pub projection: Linear,
}

impl PatchTokenizer {
    pub fn new(store: &mut ParamStore, name: &str, patch_length: usize, channels: usize, d_model: usize, rng: &mut impl Rng) -> Self {
        let projection = Linear::new(store, name, patch_length * channels, d_model, rng);
        Self { patch_length, channels, projection }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, component: Var) -> Var {
        let (t, c) = tape.shape(component);
        let l = t.div_ceil(self.patch_length);
        let flat = tape.gather(component, Arc::new(patch_indices(t, c, self.patch_length)), (l, self.patch_length * c));
        self.projection.forward(tape, p, flat)
    }
}

/// Patch-tokenize one scale component (`T_k×C`) into `ceil(T_k/p)` tokens.
pub fn patch_tokenize(store: &ParamStore, tokenizer: &PatchTokenizer, component: ArrayView2<'_, f64>) -> TokenStream {
    let tape = Tape::new();
    let p = store.bind(&tape);
    let x = tape.constant(component.to_owned());
    let h = tokenizer.forward(&tape, &p, x);
    let tokens = tape.value(h).as_ref().clone();
    let len = tokens.nrows();
    TokenStream { tokens, view: View::Multiscale, scale_lengths: Some(vec![len]) }
}

/// `L×L` mask allowing attention only inside each scale block.
pub fn build_block_mask(scale_lengths: &[usize]) -> Array2<bool> {
    let owners: Vec<usize> = scale_lengths.iter().enumerate().flat_map(|(k, &n)| std::iter::repeat_n(k, n)).collect();
    let l = owners.len();
    Array2::from_shape_fn((l, l), |(i, j)| owners[i] == owners[j])
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attention: Attention,
    norm1: LayerNorm,
    ffn: Mlp,
    norm2: LayerNorm,
}

/// Masked self-attention encoder over concatenated scale tokens with learned
/// per-scale position embeddings.
#[derive(Debug, Clone)]
pub struct MultiScaleEncoder {
    positions: Vec<ParamId>,
    layers: Vec<EncoderLayer>,
    scale_lengths: Vec<usize>,
    mask: Array2<bool>,
}

impl MultiScaleEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, scale_lengths: &[usize], rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let positions = scale_lengths
            .iter()
            .enumerate()
            .map(|(k, &l)| store.add(format!("ms.pos{k}"), gaussian(l, d, 0.02, rng)))
            .collect();
        let layers = (0..cfg.ms_encoder_depth)
            .map(|i| EncoderLayer {
                attention: Attention::new(store, &format!("ms.layer{i}.attn"), d, cfg.heads, rng),
                norm1: LayerNorm::new(store, &format!("ms.layer{i}.norm1"), d),
                ffn: Mlp::new(store, &format!("ms.layer{i}.ffn"), (d, 2 * d, d), rng),
                norm2: LayerNorm::new(store, &format!("ms.layer{i}.norm2"), d),
            })
            .collect();
        Self {
            positions,
            layers,
            scale_lengths: scale_lengths.to_vec(),
            mask: build_block_mask(scale_lengths),
        }
    }

    pub fn scale_lengths(&self) -> &[usize] {
        &self.scale_lengths
    }

    /// Encode per-scale token fragments (each `L_k×D`, coarse to fine).
    pub fn forward(&self, tape: &Tape, p: &Bound, fragments: &[Var]) -> Var {
        let placed: Vec<Var> = fragments
            .iter()
            .zip(&self.positions)
            .map(|(&h, &pos)| tape.add(h, p.var(pos)))
            .collect();
        let mut h = tape.concat_rows(&placed);
        for layer in &self.layers {
            let a = layer.attention.forward(tape, p, h, h, Some(&self.mask));
            h = layer.norm1.forward(tape, p, tape.add(h, a));
            let f = layer.ffn.forward(tape, p, h);
            h = layer.norm2.forward(tape, p, tape.add(h, f));
        }
        h
    }

    pub fn encode(&self, store: &ParamStore, fragments: &[TokenStream], mask: &Array2<bool>) -> Result<TokenStream> {
        let lengths: Vec<usize> = fragments.iter().map(TokenStream::len).collect();
        let total: usize = lengths.iter().sum();
        if mask.dim() != (total, total) || *mask != build_block_mask(&lengths) || lengths != self.scale_lengths {
            return Err(LeftError::invalid(format!(
                "mask {:?} does not match scale lengths {lengths:?}",
                mask.dim()
            )));
        }
        let tape = Tape::new();
        let p = store.bind(&tape);
        let vars: Vec<Var> = fragments.iter().map(|f| tape.constant(f.tokens.clone())).collect();
        let h = self.forward(&tape, &p, &vars);
        Ok(TokenStream {
            tokens: tape.value(h).as_ref().clone(),
            view: View::Multiscale,
            scale_lengths: Some(lengths),
        })
    }
}
