//! The full tri-view model: tokenizers, interaction, prototypes, decoders and
//! the three losses wired on one tape per window.

use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoders::{
    cycle_recons_on_tape, ms_fuse_on_tape, CycleDecoder, CycleOutputs, LatentFuser, MsDecoder, MsOutputs,
};
use crate::error::{LeftError, Result};
use crate::fusion::{FusionConfig, TriViewFusion};
use crate::losses::{smooth_l1_on_tape, LossWeights};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::prototypes::{
    align_on_tape, assign_on_tape, memory_mix_on_tape, memory_read_on_tape, AssignmentMap, PrototypeParams,
    DEFAULT_GAMMA, DEFAULT_PROTOTYPES,
};
use crate::spectral::filterbank::{decompose_on_tape, DEFAULT_TAU};
use crate::spectral::{band_decompose_downsample, FilterbankState, ScaleComponents, Spectrogram, StftConfig, StftOperator};
use crate::tape::{Tape, Var};
use crate::tokenizers::{EncoderConfig, FreqEncoder, MultiScaleEncoder, PatchTokenizer, TimeEncoder};

/// Component switches; `FULL` enables everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub interaction: bool,
    pub learnable_filterbank: bool,
    pub cycle: bool,
    pub cross_path: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation { interaction: true, learnable_filterbank: true, cycle: true, cross_path: true };

    /// All sixteen on/off combinations, full model first.
    pub fn grid() -> Vec<Ablation> {
        (0..16u8)
            .map(|bits| Ablation {
                interaction: bits & 1 == 0,
                learnable_filterbank: bits & 2 == 0,
                cycle: bits & 4 == 0,
                cross_path: bits & 8 == 0,
            })
            .collect()
    }

    /// Zero the loss weights of disabled consistency terms.
    pub fn effective_weights(&self, w: &LossWeights) -> LossWeights {
        LossWeights {
            lambda_cyc: if self.cycle { w.lambda_cyc } else { 0.0 },
            lambda_cons: if self.cross_path { w.lambda_cons } else { 0.0 },
            ..w.clone()
        }
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let off: Vec<&str> = [
            (self.interaction, "interaction"),
            (self.learnable_filterbank, "learnable_filterbank"),
            (self.cycle, "cycle"),
            (self.cross_path, "cross_path"),
        ]
        .into_iter()
        .filter(|(on, _)| !on)
        .map(|(_, name)| name)
        .collect();
        if off.is_empty() {
            f.write_str("full")
        } else {
            write!(f, "w/o {}", off.join("+"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub length: usize,
    pub channels: usize,
    /// Downsampling factors `r_1 ≥ … ≥ r_K`.
    pub factors: Vec<usize>,
    pub tau: f64,
    pub prototypes: usize,
    pub gamma: f64,
    pub beta_res: f64,
    pub beta_int: f64,
    pub stft: StftConfig,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn new(length: usize, channels: usize) -> Self {
        Self {
            length,
            channels,
            factors: vec![16, 8, 4],
            tau: DEFAULT_TAU,
            prototypes: DEFAULT_PROTOTYPES,
            gamma: DEFAULT_GAMMA,
            beta_res: 0.5,
            beta_int: 0.5,
            stft: StftConfig::default(),
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            ablation: Ablation::FULL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(LeftError::invalid("a window needs at least one channel"));
        }
        self.stft.validate()?;
        if self.length < self.stft.window_length {
            return Err(LeftError::invalid(format!(
                "window length {} is shorter than the STFT window {}",
                self.length, self.stft.window_length
            )));
        }
        FilterbankState::with_params(vec![0.0; self.factors.len()], self.factors.clone(), self.tau)?;
        if self.factors.len() < 2 {
            return Err(LeftError::invalid("the multi-scale view needs at least two bands"));
        }
        if self.length < self.factors[0] {
            return Err(LeftError::invalid("window shorter than the largest downsampling factor"));
        }
        self.encoder.validate(self.factors.len())?;
        self.fusion.validate()?;
        if self.fusion.d_model != self.encoder.d_model {
            return Err(LeftError::invalid(format!(
                "fusion width {} differs from encoder width {}",
                self.fusion.d_model, self.encoder.d_model
            )));
        }
        if self.prototypes < 2 || !(self.gamma >= 0.0) {
            return Err(LeftError::invalid("need ≥ 2 prototypes and a nonnegative temperature"));
        }
        Ok(())
    }

    pub fn scale_lengths(&self) -> Vec<usize> {
        self.factors.iter().map(|&r| self.length.div_ceil(r)).collect()
    }
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub spectrogram: Var,
    pub x_hat: Var,
    pub s_hat: Var,
    pub x_from_freq: Var,
    pub s_from_time: Var,
    pub ms_full: Var,
    pub ms_scales: Vec<Var>,
    pub targets: Vec<Var>,
    pub p_t: Var,
    pub p_f: Var,
    pub l_ms: Var,
    pub l_cyc: Var,
    pub l_cons: Var,
    pub total: Var,
}

/// Everything scoring needs from one window.
#[derive(Debug, Clone)]
pub struct Inference {
    pub cycle: CycleOutputs,
    pub ms: MsOutputs,
    pub targets: ScaleComponents,
    pub p_t: AssignmentMap,
    pub p_f: AssignmentMap,
    /// `(L_ms, L_cyc, L_cons)`.
    pub losses: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct LeftModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    time: TimeEncoder,
    freq: FreqEncoder,
    patches: Vec<PatchTokenizer>,
    ms: MultiScaleEncoder,
    fusion: Option<TriViewFusion>,
    protos: PrototypeParams,
    fuser: LatentFuser,
    cycle: CycleDecoder,
    ms_dec: MsDecoder,
    u: ParamId,
    operator: Arc<StftOperator>,
    state: FilterbankState,
}

impl LeftModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (t, c, d) = (config.length, config.channels, config.encoder.d_model);
        let operator = Arc::new(StftOperator::new(config.stft, t)?);
        let state = FilterbankState::with_params(vec![0.0; config.factors.len()], config.factors.clone(), config.tau)?;
        let scale_lengths = config.scale_lengths();

        let time = TimeEncoder::new(&mut store, &config.encoder, t, c, &mut rng);
        let freq = FreqEncoder::new(&mut store, &config.encoder, config.stft.bins(), operator.frames(), c, &mut rng);
        let patches: Vec<PatchTokenizer> = config
            .encoder
            .patch_lengths
            .iter()
            .enumerate()
            .map(|(k, &p)| PatchTokenizer::new(&mut store, &format!("patch{k}"), p, c, d, &mut rng))
            .collect();
        let token_lengths: Vec<usize> =
            scale_lengths.iter().zip(&config.encoder.patch_lengths).map(|(&l, &p)| l.div_ceil(p)).collect();
        let ms = MultiScaleEncoder::new(&mut store, &config.encoder, &token_lengths, &mut rng);
        let fusion = if config.ablation.interaction {
            Some(TriViewFusion::new(&mut store, config.fusion.clone(), &mut rng)?)
        } else {
            None
        };
        let protos = PrototypeParams::new(&mut store, config.prototypes, d, config.gamma, &mut rng);
        let fuser = LatentFuser::new(&mut store, d, &mut rng);
        let cycle = CycleDecoder::new(&mut store, d, c, Arc::clone(&operator), &mut rng);
        let ms_dec = MsDecoder::new(&mut store, d, t, c, &config.factors, &config.encoder.patch_lengths, &mut rng)?;
        let u = store.add("filterbank.u", Array2::zeros((1, config.factors.len())));
        if !config.ablation.learnable_filterbank {
            store.set_frozen(u, true);
        }
        Ok(Self { config, store, time, freq, patches, ms, fusion, protos, fuser, cycle, ms_dec, u, operator, state })
    }

    pub fn operator(&self) -> &StftOperator {
        &self.operator
    }

    /// Current filterbank state with the learned edge parameters.
    pub fn filterbank(&self) -> FilterbankState {
        FilterbankState { u: self.store.get(self.u).row(0).to_vec(), ..self.state.clone() }
    }

    fn check_window(&self, x: &Array2<f64>) -> Result<()> {
        if x.dim() != (self.config.length, self.config.channels) {
            return Err(LeftError::shape(format!(
                "window {:?}, model expects ({}, {})",
                x.dim(),
                self.config.length,
                self.config.channels
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LeftError::NonFinite("input window".into()));
        }
        Ok(())
    }

    /// Record the full model and its losses on `tape`.
    pub fn forward(&self, tape: &Tape, p: &Bound, x: &Array2<f64>, lambda: f64, w: &LossWeights) -> Result<ForwardPass> {
        self.check_window(x)?;
        let xv = tape.constant(x.clone());
        let spectrogram = tape.detach(self.operator.forward(tape, xv));

        let h_t = self.time.forward(tape, p, xv);
        let h_f = self.freq.forward(tape, p, spectrogram);
        let bands = decompose_on_tape(tape, xv, p.var(self.u), &self.state)?;
        let fragments: Vec<Var> =
            self.patches.iter().zip(&bands.components).map(|(tok, &comp)| tok.forward(tape, p, comp)).collect();
        let h_ms = self.ms.forward(tape, p, &fragments);

        let [h_t_plus, h_f_plus, h_ms_plus] = match &self.fusion {
            Some(f) => f.forward(tape, p, [h_t, h_f, h_ms]),
            None => [h_t, h_f, h_ms],
        };

        let (bank_t, bank_f) = self.protos.vars(p);
        let p_t = assign_on_tape(tape, h_t_plus, bank_t, self.protos.gamma);
        let p_f_raw = assign_on_tape(tape, h_f_plus, bank_f, self.protos.gamma);
        let p_f = align_on_tape(tape, p_f_raw, self.config.length);
        let z_t = memory_mix_on_tape(tape, tape.mean_cols(h_t_plus), memory_read_on_tape(tape, p_t, bank_t), lambda);
        let z_f = memory_mix_on_tape(tape, tape.mean_cols(h_f_plus), memory_read_on_tape(tape, p_f_raw, bank_f), lambda);
        let z = self.fuser.forward(tape, p, z_t, z_f);

        let (x_hat, s_hat) = self.cycle.forward(tape, p, z);
        let (x_from_freq, s_from_time) = cycle_recons_on_tape(tape, &self.operator, x_hat, s_hat);

        let h_tilde = ms_fuse_on_tape(tape, h_ms, h_ms_plus, self.config.beta_res, self.config.beta_int);
        let (ms_scales, ms_full) = self.ms_dec.forward(tape, p, h_tilde);
        let targets: Vec<Var> = bands.components[1..].to_vec();

        let omega = &w.omega;
        if omega.len() != ms_scales.len() + 1 {
            return Err(LeftError::invalid(format!(
                "{} scale weights for {} supervised scales plus full rate",
                omega.len(),
                ms_scales.len()
            )));
        }
        let mut l_ms = tape.scale(smooth_l1_on_tape(tape, ms_full, xv), omega[ms_scales.len()]);
        for (k, (&out, &target)) in ms_scales.iter().zip(&targets).enumerate() {
            l_ms = tape.add(l_ms, tape.scale(smooth_l1_on_tape(tape, out, target), omega[k]));
        }
        let l_cyc = tape.add(smooth_l1_on_tape(tape, s_from_time, spectrogram), smooth_l1_on_tape(tape, x_from_freq, xv));
        let l_cons = smooth_l1_on_tape(tape, ms_full, x_from_freq);
        let total = tape.add(
            tape.add(tape.scale(l_ms, w.lambda_ms), tape.scale(l_cyc, w.lambda_cyc)),
            tape.scale(l_cons, w.lambda_cons),
        );
        Ok(ForwardPass {
            spectrogram,
            x_hat,
            s_hat,
            x_from_freq,
            s_from_time,
            ms_full,
            ms_scales,
            targets,
            p_t,
            p_f,
            l_ms,
            l_cyc,
            l_cons,
            total,
        })
    }

    pub fn infer(&self, x: &Array2<f64>, lambda: f64) -> Result<Inference> {
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let w = LossWeights::uniform(self.config.factors.len());
        let f = self.forward(&tape, &p, x, lambda, &w)?;
        let val = |v: Var| tape.value(v).as_ref().clone();
        let spec = |v: Var| Spectrogram::from_tape_layout(&tape.value(v), self.config.stft, self.config.length);
        let cycle = CycleOutputs {
            x_hat: val(f.x_hat),
            s_hat: spec(f.s_hat)?,
            x_from_freq: val(f.x_from_freq),
            s_from_time: spec(f.s_from_time)?,
        };
        let ms = MsOutputs { full_rate: val(f.ms_full), per_scale: f.ms_scales.iter().map(|&v| val(v)).collect() };
        let targets = band_decompose_downsample(x.view(), &self.filterbank())?;
        Ok(Inference {
            cycle,
            ms,
            targets,
            p_t: AssignmentMap { probs: val(f.p_t) },
            p_f: AssignmentMap { probs: val(f.p_f) },
            losses: [tape.scalar(f.l_ms), tape.scalar(f.l_cyc), tape.scalar(f.l_cons)],
        })
    }
}
