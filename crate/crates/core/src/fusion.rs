//! Directed cross-attention between the three token views.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LeftError, Result};
use crate::nn::{Attention, Bound, LayerNorm, ParamStore};
use crate::tape::{Tape, Var};
use crate::tokenizers::TokenStream;

/// Which views exchange information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// time ← freq, freq ← time, ms ← time.
    Default,
    /// Every view attends to both others; the two outputs are summed.
    AllPairs,
    /// ms ↔ freq only.
    Mf,
    /// ms ↔ time only.
    Mt,
    /// time ↔ freq only.
    Tf,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 5] = [Self::Default, Self::AllPairs, Self::Mf, Self::Mt, Self::Tf];

    /// Enabled `(target, source)` links.
    pub fn links(self) -> &'static [(Stream, Stream)] {
        use Stream::*;
        match self {
            Self::Default => &[(Time, Freq), (Freq, Time), (Ms, Time)],
            Self::AllPairs => &[(Time, Freq), (Time, Ms), (Freq, Time), (Freq, Ms), (Ms, Time), (Ms, Freq)],
            Self::Mf => &[(Ms, Freq), (Freq, Ms)],
            Self::Mt => &[(Ms, Time), (Time, Ms)],
            Self::Tf => &[(Time, Freq), (Freq, Time)],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Default => "default",
            Self::AllPairs => "all_pairs",
            Self::Mf => "mf",
            Self::Mt => "mt",
            Self::Tf => "tf",
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionStrategy {
    type Err = LeftError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| LeftError::invalid(format!("unknown fusion strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stream {
    Time,
    Freq,
    Ms,
}

impl Stream {
    fn index(self) -> usize {
        self as usize
    }

    fn tag(self) -> &'static str {
        match self {
            Stream::Time => "t",
            Stream::Freq => "f",
            Stream::Ms => "m",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub depth: usize,
    pub strategy: FusionStrategy,
    pub heads: usize,
    pub d_model: usize,
    /// Apply the updates in the order time, freq, ms, each seeing the
    /// already-updated streams, instead of from a common snapshot.
    pub sequential: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { depth: 1, strategy: FusionStrategy::Default, heads: 4, d_model: 64, sequential: false }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(LeftError::invalid("fusion depth must be ≥ 1"));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(LeftError::invalid("fusion d_model must be a multiple of heads"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Link {
    target: Stream,
    source: Stream,
    attention: Attention,
}

#[derive(Debug, Clone)]
struct FusionLayer {
    links: Vec<Link>,
    norms: [Option<LayerNorm>; 3],
}

/// Stack of fusion layers for one strategy.
#[derive(Debug, Clone)]
pub struct TriViewFusion {
    config: FusionConfig,
    layers: Vec<FusionLayer>,
}

impl TriViewFusion {
    pub fn new(store: &mut ParamStore, config: FusionConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let layers = (0..config.depth)
            .map(|l| {
                let links: Vec<Link> = config
                    .strategy
                    .links()
                    .iter()
                    .map(|&(target, source)| Link {
                        target,
                        source,
                        attention: Attention::new(
                            store,
                            &format!("fusion.layer{l}.{}{}", target.tag(), source.tag()),
                            d,
                            config.heads,
                            rng,
                        ),
                    })
                    .collect();
                let norms = [Stream::Time, Stream::Freq, Stream::Ms].map(|s| {
                    links
                        .iter()
                        .any(|k| k.target == s)
                        .then(|| LayerNorm::new(store, &format!("fusion.layer{l}.norm_{}", s.tag()), d))
                });
                FusionLayer { links, norms }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    /// Fuse `[time, freq, ms]` streams; untouched streams pass through as the same node.
    pub fn forward(&self, tape: &Tape, p: &Bound, streams: [Var; 3]) -> [Var; 3] {
        let mut cur = streams;
        for layer in &self.layers {
            let snapshot = cur;
            for target in [Stream::Time, Stream::Freq, Stream::Ms] {
                let Some(norm) = layer.norms[target.index()] else { continue };
                let source_of = |s: Stream| if self.config.sequential { cur[s.index()] } else { snapshot[s.index()] };
                let own = source_of(target);
                let mut update: Option<Var> = None;
                for link in layer.links.iter().filter(|k| k.target == target) {
                    let a = link.attention.forward(tape, p, own, source_of(link.source), None);
                    update = Some(update.map_or(a, |u| tape.add(u, a)));
                }
                let summed = tape.add(own, update.expect("normed stream has a link"));
                cur[target.index()] = norm.forward(tape, p, summed);
            }
        }
        cur
    }
}

/// Fuse three token streams with `fusion`'s parameters in `store`.
pub fn fuse_tri_view(
    store: &ParamStore,
    fusion: &TriViewFusion,
    h_time: &TokenStream,
    h_freq: &TokenStream,
    h_ms: &TokenStream,
) -> Result<(TokenStream, TokenStream, TokenStream)> {
    let d = fusion.config.d_model;
    for (name, s) in [("time", h_time), ("frequency", h_freq), ("multiscale", h_ms)] {
        if s.dim() != d {
            return Err(LeftError::invalid(format!("{name} tokens have D = {}, expected {d}", s.dim())));
        }
    }
    let tape = Tape::new();
    let p = store.bind(&tape);
    let vars = [h_time, h_freq, h_ms].map(|s| tape.constant(s.tokens.clone()));
    let out = fusion.forward(&tape, &p, vars);
    let wrap = |v: Var, like: &TokenStream| TokenStream {
        tokens: tape.value(v).as_ref().clone(),
        view: like.view,
        scale_lengths: like.scale_lengths.clone(),
    };
    Ok((wrap(out[0], h_time), wrap(out[1], h_freq), wrap(out[2], h_ms)))
}
