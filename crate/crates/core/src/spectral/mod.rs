//! Spectral analysis: real FFT helpers, STFT analysis/synthesis and the
//! learnable band-split filterbank.

pub mod fft;
pub mod filterbank;
pub mod stft;

pub use filterbank::{
    aliasing_energy_oracle, aliasing_leakage, band_decompose_downsample, band_masks, learned_edges,
    nyquist_cutoffs, BandMasks, FilterbankState, ScaleComponents,
};
pub use stft::{stft_forward, stft_inverse, Spectrogram, StftConfig, StftOperator, WindowKind};
