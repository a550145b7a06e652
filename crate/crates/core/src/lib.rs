//! Tri-view time-series anomaly detection.

pub mod checkpoint;
pub mod data;
pub mod decoders;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod prototypes;
pub mod scoring;
pub mod spectral;
pub mod tape;
pub mod tokenizers;
pub mod training;
pub mod window;

pub use checkpoint::Checkpoint;
pub use data::{load_dataset, synth_generate, AnomalyKind, AnomalySpec, SeriesDataset, Standardizer, SynthConfig};
pub use decoders::{CycleOutputs, MsOutputs, SharedLatent, Upsampling};
pub use error::{LeftError, Result};
pub use fusion::{FusionConfig, FusionStrategy, Stream};
pub use losses::LossWeights;
pub use metrics::{LabeledScores, MetricTable, SpotThreshold, VusConfig};
pub use model::{Ablation, Inference, LeftModel, ModelConfig};
pub use prototypes::{AssignmentMap, PrototypeBank};
pub use scoring::{AnomalyMap, ScoreWeights, SeriesEvidence, WindowEvidence};
pub use spectral::{FilterbankState, ScaleComponents, Spectrogram, StftConfig, WindowKind};
pub use tokenizers::{EncoderConfig, TokenStream, View};
pub use training::{Curriculum, TrainConfig, Trainer};
pub use window::TimeSeriesWindow;
