//! Training schedules: warmup+cosine learning rate, boundary-token loss
//! weighting, the stream-length curriculum, dropout warm-in, and early
//! stopping on validation perplexity.

use super::TrainConfig;

/// Linear warmup to the peak over the first `warmup_frac` of steps, then
/// cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let total = total_steps as f64;
    let warm = cfg.warmup_frac * total;
    let s = (step as f64).min(total);
    if warm > 0.0 && s <= warm {
        return cfg.peak_lr * (s / warm);
    }
    let progress = ((s - warm) / (total - warm)).clamp(0.0, 1.0);
    cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Full weight in the first epoch, down-weighted thereafter.
pub fn eos_weight(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch <= 1 {
        cfg.eos_w_warm
    } else {
        cfg.eos_w_after
    }
}

/// Stream length for an epoch: starts at `s_initial` and grows by `s_step`
/// every `s_every` epochs.
pub fn curriculum_s(epoch: usize, cfg: &TrainConfig) -> usize {
    cfg.s_initial + cfg.s_step * ((epoch.max(1) - 1) / cfg.s_every)
}

/// Warm-in multiplier for token and sentence-representation dropout over the
/// global sentence-step counter; attention dropout is not scaled.
pub fn dropout_warmin(sentence_step: u64, cfg: &TrainConfig) -> f64 {
    if sentence_step < cfg.warmin_low {
        0.0
    } else if sentence_step < cfg.warmin_high {
        0.5
    } else {
        1.0
    }
}

/// Early stopping: stop after `patience` consecutive epochs without an
/// improvement larger than `min_delta` in validation perplexity.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    best: f64,
    stale: usize,
    min_delta: f64,
    patience: usize,
}

impl EarlyStopper {
    pub fn new(min_delta: f64, patience: usize) -> EarlyStopper {
        EarlyStopper {
            best: f64::INFINITY,
            stale: 0,
            min_delta,
            patience,
        }
    }

    /// Record an epoch's validation perplexity; true means stop now.
    pub fn observe(&mut self, ppl: f64) -> bool {
        if self.best - ppl > self.min_delta {
            self.best = ppl;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}
