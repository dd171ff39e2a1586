//! Optimization: AdamW with decoupled decay, warmup+cosine learning rate,
//! boundary-token down-weighting, the stream-length curriculum with
//! re-chunking, dropout warm-in, and early stopping.

mod adamw;
mod schedules;
mod trainer;

pub use adamw::{adamw_step, clip_gradients, OptState};
pub use schedules::{curriculum_s, dropout_warmin, eos_weight, lr_at, EarlyStopper};
pub use trainer::{batch_gradients, train, BatchStats, TrainData, TrainReport};

/// Training hyperparameters and schedule constants.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub warmup_frac: f64,
    pub epochs_max: usize,
    /// Optional hard cap on optimizer steps (smoke runs).
    pub max_steps: Option<usize>,
    /// Stream-length curriculum: start, increment, and epoch period.
    pub s_initial: usize,
    pub s_step: usize,
    pub s_every: usize,
    /// Boundary-token loss weight in epoch 1 and thereafter.
    pub eos_w_warm: f64,
    pub eos_w_after: f64,
    /// Dropout warm-in thresholds in sentence steps (0 / 50% / 100%).
    pub warmin_low: u64,
    pub warmin_high: u64,
    pub early_stop_min_delta: f64,
    pub early_stop_patience: usize,
    /// Target lexical tokens per batch.
    pub batch_budget: usize,
    /// Stream-count cap per batch.
    pub max_streams: usize,
    pub bucket_width: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 2.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            warmup_frac: 0.02,
            epochs_max: 50,
            max_steps: None,
            s_initial: 30,
            s_step: 12,
            s_every: 5,
            eos_w_warm: 1.0,
            eos_w_after: 0.05,
            warmin_low: 2000,
            warmin_high: 7000,
            early_stop_min_delta: 0.1,
            early_stop_patience: 3,
            batch_budget: 8192,
            max_streams: 32,
            bucket_width: 5,
            log_every: 10,
            seed: 0,
        }
    }
}
