//! Shared-latent cycle decoding and the coarse-to-fine multi-scale head.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LeftError, Result};
use crate::nn::{gaussian, Bound, Mlp, ParamId, ParamStore};
use crate::prototypes::interpolation_matrix;
use crate::spectral::{stft_forward, stft_inverse, Spectrogram, StftOperator};
use crate::tape::{Mat, Tape, Var};
use crate::tokenizers::{TokenStream, View};

#[derive(Debug, Clone, PartialEq)]
pub struct SharedLatent {
    pub z: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleOutputs {
    pub x_hat: Array2<f64>,
    pub s_hat: Spectrogram,
    pub x_from_freq: Array2<f64>,
    pub s_from_time: Spectrogram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsOutputs {
    pub full_rate: Array2<f64>,
    /// Reconstructions for scales 2..=K, coarse to fine.
    pub per_scale: Vec<Array2<f64>>,
}

/// `φ([z_t⁺; z_f⁺])`.
#[derive(Debug, Clone, Copy)]
pub struct LatentFuser {
    pub mlp: Mlp,
    pub d_model: usize,
}

impl LatentFuser {
    pub fn new(store: &mut ParamStore, d_model: usize, rng: &mut impl Rng) -> Self {
        Self { mlp: Mlp::new(store, "latent", (2 * d_model, d_model, d_model), rng), d_model }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, z_t: Var, z_f: Var) -> Var {
        self.mlp.forward(tape, p, tape.concat_cols(&[z_t, z_f]))
    }
}

pub fn fuse_latent(
    store: &ParamStore,
    fuser: &LatentFuser,
    z_t_plus: &Array1<f64>,
    z_f_plus: &Array1<f64>,
) -> Result<SharedLatent> {
    if z_t_plus.len() != fuser.d_model || z_f_plus.len() != fuser.d_model {
        return Err(LeftError::invalid(format!(
            "latents of width {} and {} for a fuser of width {}",
            z_t_plus.len(),
            z_f_plus.len(),
            fuser.d_model
        )));
    }
    if z_t_plus.iter().chain(z_f_plus).any(|v| !v.is_finite()) {
        return Err(LeftError::NonFinite("latent input".into()));
    }
    let tape = Tape::new();
    let p = store.bind(&tape);
    let row = |v: &Array1<f64>| tape.constant(v.clone().insert_axis(ndarray::Axis(0)));
    let z = fuser.forward(&tape, &p, row(z_t_plus), row(z_f_plus));
    Ok(SharedLatent { z: tape.value(z).row(0).to_owned() })
}

/// Position-conditioned time head and a flat spectrogram head.
#[derive(Debug, Clone)]
pub struct CycleDecoder {
    pub length: usize,
    pub channels: usize,
    pub positions: ParamId,
    pub time_head: Mlp,
    pub freq_head: Mlp,
    pub operator: Arc<StftOperator>,
}

impl CycleDecoder {
    pub fn new(
        store: &mut ParamStore,
        d_model: usize,
        channels: usize,
        operator: Arc<StftOperator>,
        rng: &mut impl Rng,
    ) -> Self {
        let length = operator.length;
        let positions = store.add("dec.time.pos", gaussian(length, d_model, 0.5, rng));
        let time_head = Mlp::new(store, "dec.time", (d_model, 2 * d_model, channels), rng);
        let spec_width = operator.rows() * 2 * channels;
        let freq_head = Mlp::new(store, "dec.freq", (d_model, d_model, spec_width), rng);
        Self { length, channels, positions, time_head, freq_head, operator }
    }

    /// `(X̂, Ŝ)` with `Ŝ` in tape layout.
    pub fn forward(&self, tape: &Tape, p: &Bound, z: Var) -> (Var, Var) {
        let grid = tape.add_row(p.var(self.positions), z);
        let x_hat = self.time_head.forward(tape, p, grid);
        let flat = self.freq_head.forward(tape, p, z);
        let s_hat = tape.reshape(flat, (self.operator.rows(), 2 * self.channels));
        (x_hat, s_hat)
    }
}

pub fn cycle_decode(store: &ParamStore, dec: &CycleDecoder, z: &SharedLatent) -> Result<(Array2<f64>, Spectrogram)> {
    let tape = Tape::new();
    let p = store.bind(&tape);
    let zv = tape.constant(z.z.clone().insert_axis(ndarray::Axis(0)));
    let (x, s) = dec.forward(&tape, &p, zv);
    let spec = Spectrogram::from_tape_layout(&tape.value(s), dec.operator.config, dec.length)?;
    Ok((tape.value(x).as_ref().clone(), spec))
}

/// `(X̂_{←f}, Ŝ_{→f})` on the tape.
pub fn cycle_recons_on_tape(tape: &Tape, op: &StftOperator, x_hat: Var, s_hat: Var) -> (Var, Var) {
    (op.inverse(tape, s_hat), op.forward(tape, x_hat))
}

pub fn cycle_recons(x_hat: &Array2<f64>, s_hat: &Spectrogram) -> Result<CycleOutputs> {
    if x_hat.nrows() != s_hat.origin_length || x_hat.ncols() != s_hat.channels() {
        return Err(LeftError::shape(format!(
            "window {:?} vs spectrogram of {} samples × {} channels",
            x_hat.dim(),
            s_hat.origin_length,
            s_hat.channels()
        )));
    }
    let x_from_freq = stft_inverse(s_hat)?;
    let s_from_time = stft_forward(x_hat.view(), &s_hat.config)?;
    Ok(CycleOutputs { x_hat: x_hat.clone(), s_hat: s_hat.clone(), x_from_freq, s_from_time })
}

/// `H̃^ms = β_res·H^ms + β_int·H^ms⁺`.
pub fn ms_fuse_tokens(h_ms: &TokenStream, h_ms_plus: &TokenStream, beta_res: f64, beta_int: f64) -> Result<TokenStream> {
    if h_ms.tokens.dim() != h_ms_plus.tokens.dim() {
        return Err(LeftError::invalid(format!(
            "token streams {:?} and {:?} differ in shape",
            h_ms.tokens.dim(),
            h_ms_plus.tokens.dim()
        )));
    }
    Ok(TokenStream {
        tokens: &h_ms.tokens * beta_res + &h_ms_plus.tokens * beta_int,
        view: View::Multiscale,
        scale_lengths: h_ms.scale_lengths.clone().or_else(|| h_ms_plus.scale_lengths.clone()),
    })
}

pub fn ms_fuse_on_tape(tape: &Tape, h_ms: Var, h_ms_plus: Var, beta_res: f64, beta_int: f64) -> Var {
    tape.add(tape.scale(h_ms, beta_res), tape.scale(h_ms_plus, beta_int))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsampling {
    #[default]
    Nearest,
    Linear,
}

/// `to×from` token-space upsampling matrix.
pub fn upsampling_matrix(from: usize, to: usize, mode: Upsampling) -> Mat {
    match mode {
        Upsampling::Nearest => {
            let mut m = Mat::zeros((to, from));
            for i in 0..to {
                m[[i, i * from / to]] = 1.0;
            }
            m
        }
        Upsampling::Linear => interpolation_matrix(from, to),
    }
}

/// Per-scale patch decoders for scales 2..=K plus a full-rate head fed from the finest tokens.
#[derive(Debug, Clone)]
pub struct MsDecoder {
    pub length: usize,
    pub channels: usize,
    /// `T_k` for every scale.
    pub scale_lengths: Vec<usize>,
    /// `L_k` for every scale.
    pub token_lengths: Vec<usize>,
    pub patch_lengths: Vec<usize>,
    /// Full-rate samples per finest-scale token, `p_K·r_K`.
    pub full_patch: usize,
    pub heads: Vec<Mlp>,
    pub full_head: Mlp,
    pub upsampling: Upsampling,
}

impl MsDecoder {
    pub fn new(
        store: &mut ParamStore,
        d_model: usize,
        length: usize,
        channels: usize,
        factors: &[usize],
        patch_lengths: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if factors.len() < 2 || factors.len() != patch_lengths.len() || factors.contains(&0) {
            return Err(LeftError::invalid("multi-scale decoding needs ≥ 2 scales with one patch length each"));
        }
        let scale_lengths: Vec<usize> = factors.iter().map(|&r| length.div_ceil(r)).collect();
        let token_lengths: Vec<usize> =
            scale_lengths.iter().zip(patch_lengths).map(|(&t, &p)| t.div_ceil(p)).collect();
        let heads = (1..scale_lengths.len())
            .map(|k| Mlp::new(store, &format!("dec.ms{k}"), (d_model, 2 * d_model, patch_lengths[k] * channels), rng))
            .collect();
        let full_patch = patch_lengths[patch_lengths.len() - 1] * factors[factors.len() - 1];
        let full_head = Mlp::new(store, "dec.ms_full", (d_model, 2 * d_model, full_patch * channels), rng);
        Ok(Self {
            length,
            channels,
            full_patch,
            scale_lengths,
            token_lengths,
            patch_lengths: patch_lengths.to_vec(),
            heads,
            full_head,
            upsampling: Upsampling::Nearest,
        })
    }

    fn decode_patches(&self, tape: &Tape, p: &Bound, head: &Mlp, tokens: Var, patch: usize, crop: usize) -> Var {
        let n = tape.shape(tokens).0;
        let flat = head.forward(tape, p, tokens);
        let rows = tape.reshape(flat, (n * patch, self.channels));
        tape.slice_rows(rows, 0, crop)
    }

    fn upsample(&self, tape: &Tape, tokens: Var, to: usize) -> Var {
        let from = tape.shape(tokens).0;
        if from == to {
            return tokens;
        }
        tape.matmul(tape.constant(upsampling_matrix(from, to, self.upsampling)), tokens)
    }

    /// Coarse-to-fine: each scale decodes the upsampled running context plus its own
    /// block; the full-rate head decodes every finest-context token into `p_K·r_K`
    /// samples. Returns `(per_scale, full_rate)`.
    pub fn forward(&self, tape: &Tape, p: &Bound, h_tilde: Var) -> (Vec<Var>, Var) {
        let mut blocks = Vec::with_capacity(self.token_lengths.len());
        let mut start = 0;
        for &l in &self.token_lengths {
            blocks.push(tape.slice_rows(h_tilde, start, start + l));
            start += l;
        }
        let mut context = blocks[0];
        let mut per_scale = Vec::with_capacity(blocks.len() - 1);
        for k in 1..blocks.len() {
            context = tape.add(self.upsample(tape, context, self.token_lengths[k]), blocks[k]);
            per_scale.push(self.decode_patches(tape, p, &self.heads[k - 1], context, self.patch_lengths[k], self.scale_lengths[k]));
        }
        let full_in = self.upsample(tape, context, self.length.div_ceil(self.full_patch));
        let full = self.decode_patches(tape, p, &self.full_head, full_in, self.full_patch, self.length);
        (per_scale, full)
    }
}

pub fn ms_decode(store: &ParamStore, dec: &MsDecoder, h_tilde: &TokenStream) -> Result<MsOutputs> {
    let lengths = h_tilde
        .scale_lengths
        .as_ref()
        .ok_or_else(|| LeftError::invalid("multi-scale tokens carry no scale metadata"))?;
    if lengths != &dec.token_lengths {
        return Err(LeftError::invalid(format!("scale lengths {lengths:?}, decoder expects {:?}", dec.token_lengths)));
    }
    let tape = Tape::new();
    let p = store.bind(&tape);
    let h = tape.constant(h_tilde.tokens.clone());
    let (per_scale, full) = dec.forward(&tape, &p, h);
    Ok(MsOutputs {
        full_rate: tape.value(full).as_ref().clone(),
        per_scale: per_scale.into_iter().map(|v| tape.value(v).as_ref().clone()).collect(),
    })
}
