//! Evaluation: lexical-only perplexity over whole documents, the father-son
//! relation-reversal probe, and power-law scaling fits with effective
//! resource multipliers.

mod perplexity;
mod probe;
mod scaling;

pub use perplexity::{eval_perplexity, PplReport, SentenceStepper};
pub use probe::{
    probe_csv, run_probe, AnswerScorer, Condition, CopyOracleScorer, DecoderScorer, ProbeResult,
    ProbeSample, TgScorer, UniformScorer, CONTEXT_TEMPLATE, NORMAL_QUERY_TEMPLATE,
    REVERSED_QUERY_TEMPLATE,
};
pub use scaling::{effective_multipliers, fit_power_law, log_linear_trend, ScalingFit};
