//! The two-level architecture and its baseline/ablation variants behind one
//! configuration surface.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, OptSnapshot};
pub use config::{LayerKind, ModelConfig, Variant};
pub use forward::{
    build_memory_kv, causal_pad_mask, embed_and_seed, flagged_nll, flatten_stream,
    forward_decoder, forward_sentence_step, gist_mask, sentence_annotations,
    sentence_position_encoding, shifted_targets, stream_training_loss, stream_weight_total,
    window_chunks, Ctx, DropoutRates, ForwardOpts, Memory, MemoryKv, StepOutput, StreamLoss,
};
pub use params::{
    count_nonembedding_params, name_index, schema, validate_grads_shape, AttnIx, Bound, FfnIx,
    Init, LayerIx, NormIx, ParamSpec, Params, Schema,
};
