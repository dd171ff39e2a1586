//! Two-level token/sentence recurrent transformer language modeling.
//!
//! The model (`tg`) predicts the tokens of one sentence at a time while
//! cross-attending to a rolling memory of earlier sentence vectors. Sentence
//! vectors are written to memory with their computation graph retained, so
//! token losses on later sentences backpropagate into the parameters that
//! produced earlier sentence representations.
//!
//! Crate layout:
//! - [`autodiff`]: minimal reverse-mode differentiable-array substrate
//! - [`textpipe`]: corpus -> sentence tensors -> streams -> token-budget batches
//! - [`model`]: the architecture plus its baseline/ablation variants
//! - [`training`]: AdamW, schedules, and the training loop
//! - [`eval`]: lexical perplexity, relation-reversal probe, power-law fits
//! - [`synth`]: templated synthetic corpora with cross-sentence dependencies
//! - [`exec`]: sequential/parallel execution facade (rayon behind `parallel`)

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod exec;
pub mod model;
pub mod seeds;
pub mod synth;
pub mod textpipe;
pub mod training;

pub use error::{Error, Result};
