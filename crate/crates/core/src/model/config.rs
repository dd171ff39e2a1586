//! Model configuration and the baseline/ablation variant switchboard.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Architecture variant. `Tg` is the two-level model with alternating
/// self/cross layers; the rest are the baselines and ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Tg,
    /// Plain causal decoder over the lexical token stream.
    Gpt2,
    /// Decoder over the stream with BOS/EOS (and EOD) markers kept in.
    Gpt2Boundary,
    /// Decoder with the gist attention-bias mask over the boundary stream.
    Gpt2Gist,
    /// Sentence steps replaced by fixed lexical-token spans of this length.
    TgFixedSpan(usize),
    /// Sentence vectors detached at memory write time.
    TgDetach,
    /// Memory vectors prepended as key/value prefix rows inside every
    /// self-attention layer instead of a cross-attention path.
    TgIncontext,
    /// Every layer runs self-attention then cross-attention serially.
    TgSelfThenCross,
    /// Every layer runs both on the same normed input, increments summed.
    TgParallel,
    /// Sentence vector read from the last layer instead of the mid layer.
    TgLastLayer,
    /// Static BOS embedding: no context seeding.
    TgNoSeed,
}

impl Variant {
    pub const ALL_NAMES: &'static [&'static str] = &[
        "tg",
        "gpt2",
        "gpt2_boundary",
        "gpt2_gist",
        "tg_fixed_span_<N>",
        "tg_detach",
        "tg_incontext",
        "tg_self_then_cross",
        "tg_parallel",
        "tg_last_layer",
        "tg_no_seed",
    ];

    /// Decoder baselines consume flat token streams and have no memory.
    pub fn is_decoder(self) -> bool {
        matches!(self, Variant::Gpt2 | Variant::Gpt2Boundary | Variant::Gpt2Gist)
    }

    pub fn uses_memory(self) -> bool {
        !self.is_decoder()
    }

    pub fn uses_seeding(self) -> bool {
        self.uses_memory() && self != Variant::TgNoSeed
    }

    pub fn detaches_memory_writes(self) -> bool {
        self == Variant::TgDetach
    }

    pub fn fixed_span(self) -> Option<usize> {
        match self {
            Variant::TgFixedSpan(n) => Some(n),
            _ => None,
        }
    }

    /// Decoder streams keep boundary tokens?
    pub fn keeps_boundaries(self) -> bool {
        matches!(self, Variant::Gpt2Boundary | Variant::Gpt2Gist)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Tg => write!(f, "tg"),
            Variant::Gpt2 => write!(f, "gpt2"),
            Variant::Gpt2Boundary => write!(f, "gpt2_boundary"),
            Variant::Gpt2Gist => write!(f, "gpt2_gist"),
            Variant::TgFixedSpan(n) => write!(f, "tg_fixed_span_{}", n),
            Variant::TgDetach => write!(f, "tg_detach"),
            Variant::TgIncontext => write!(f, "tg_incontext"),
            Variant::TgSelfThenCross => write!(f, "tg_self_then_cross"),
            Variant::TgParallel => write!(f, "tg_parallel"),
            Variant::TgLastLayer => write!(f, "tg_last_layer"),
            Variant::TgNoSeed => write!(f, "tg_no_seed"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tg" => Ok(Variant::Tg),
            "gpt2" => Ok(Variant::Gpt2),
            "gpt2_boundary" => Ok(Variant::Gpt2Boundary),
            "gpt2_gist" => Ok(Variant::Gpt2Gist),
            "tg_detach" => Ok(Variant::TgDetach),
            "tg_incontext" => Ok(Variant::TgIncontext),
            "tg_self_then_cross" => Ok(Variant::TgSelfThenCross),
            "tg_parallel" => Ok(Variant::TgParallel),
            "tg_last_layer" => Ok(Variant::TgLastLayer),
            "tg_no_seed" => Ok(Variant::TgNoSeed),
            other => {
                if let Some(n) = other.strip_prefix("tg_fixed_span_") {
                    let n: usize = n
                        .parse()
                        .map_err(|_| Error::Config(format!("invalid variant `{}`", other)))?;
                    if n == 0 {
                        return Err(Error::Config("span length must be positive".into()));
                    }
                    return Ok(Variant::TgFixedSpan(n));
                }
                Err(Error::Config(format!(
                    "invalid variant `{}`; expected one of {}",
                    other,
                    Variant::ALL_NAMES.join(", ")
                )))
            }
        }
    }
}

impl Serialize for Variant {
    fn serialize<Ser: Serializer>(&self, s: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// What one transformer layer contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    SelfOnly,
    CrossOnly,
    /// Self then cross, serially, each with its own pre-norm.
    SelfThenCross,
    /// Self and cross on the same normed input; increments summed.
    ParallelBoth,
    /// Self-attention with memory rows prepended as extra key/value positions.
    SelfWithMemoryPrefix,
}

impl LayerKind {
    pub fn has_self(self) -> bool {
        !matches!(self, LayerKind::CrossOnly)
    }

    pub fn has_cross(self) -> bool {
        matches!(
            self,
            LayerKind::CrossOnly | LayerKind::SelfThenCross | LayerKind::ParallelBoth
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    /// Lexical token cap per sentence (L).
    pub lexical_cap: usize,
    /// Rolling memory capacity (M).
    pub memory_capacity: usize,
    /// 1-based layer whose output feeds the sentence head.
    pub sentence_layer: usize,
    pub sentence_head_depth: usize,
    /// Context window for the decoder baselines.
    pub context_window: usize,
    pub variant: Variant,
    pub dropout_token: f64,
    pub dropout_sentence_rep: f64,
    pub dropout_attention: f64,
    pub gate_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 8192,
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            ffn_mult: 4,
            lexical_cap: 64,
            memory_capacity: 40,
            sentence_layer: 7,
            sentence_head_depth: 1,
            context_window: 1024,
            variant: Variant::Tg,
            dropout_token: 0.15,
            dropout_sentence_rep: 0.15,
            dropout_attention: 0.2,
            gate_init: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Effective lexical cap: fixed-span variants may exceed the sentence cap.
    pub fn effective_cap(&self) -> usize {
        match self.variant.fixed_span() {
            Some(n) => self.lexical_cap.max(n),
            None => self.lexical_cap,
        }
    }

    /// Sentence tensor length T = 1 + cap + 2.
    pub fn tensor_len(&self) -> usize {
        1 + self.effective_cap() + 2
    }

    /// Rows of the learned token-position table.
    pub fn position_rows(&self) -> usize {
        if self.variant.is_decoder() {
            self.context_window
        } else {
            self.tensor_len()
        }
    }

    /// 1-based layer whose post-block output feeds the sentence head.
    pub fn extraction_layer(&self) -> usize {
        if self.variant == Variant::TgLastLayer {
            self.n_layers
        } else {
            self.sentence_layer
        }
    }

    /// Per-layer composition for this variant. The baseline alternates
    /// self-attention on odd layers and cross-attention on even layers
    /// (1-based).
    pub fn layer_plan(&self) -> Vec<LayerKind> {
        (1..=self.n_layers)
            .map(|l| match self.variant {
                Variant::Gpt2 | Variant::Gpt2Boundary | Variant::Gpt2Gist => LayerKind::SelfOnly,
                Variant::TgIncontext => LayerKind::SelfWithMemoryPrefix,
                Variant::TgSelfThenCross => LayerKind::SelfThenCross,
                Variant::TgParallel => LayerKind::ParallelBoth,
                _ => {
                    if l % 2 == 1 {
                        LayerKind::SelfOnly
                    } else {
                        LayerKind::CrossOnly
                    }
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be positive".into()));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be positive".into()));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config(
                "vocab_size must cover the reserved ids plus at least one lexical token".into(),
            ));
        }
        if self.lexical_cap == 0 {
            return Err(Error::Config("lexical_cap must be positive".into()));
        }
        if self.variant.uses_memory() {
            if self.memory_capacity == 0 {
                return Err(Error::Config(
                    "memory variants require memory_capacity >= 1".into(),
                ));
            }
            let ls = self.extraction_layer();
            if ls == 0 || ls > self.n_layers {
                return Err(Error::Config(format!(
                    "sentence_layer {} outside 1..={}",
                    ls, self.n_layers
                )));
            }
        }
        if self.variant.is_decoder() && self.context_window < 2 {
            return Err(Error::Config("context_window must be at least 2".into()));
        }
        for (name, rate) in [
            ("dropout_token", self.dropout_token),
            ("dropout_sentence_rep", self.dropout_sentence_rep),
            ("dropout_attention", self.dropout_attention),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("{} {} not in [0, 1)", name, rate)));
            }
        }
        Ok(())
    }
}
