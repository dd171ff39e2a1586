//! The training loop: token-budget batches of sentence streams, one AdamW
//! step per batch, per-epoch validation with early stopping and best-
//! checkpoint selection, curriculum re-chunking, and CSV logging.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng as _;

use super::adamw::{adamw_step, clip_gradients, OptState};
use super::schedules::{curriculum_s, dropout_warmin, eos_weight, lr_at, EarlyStopper};
use super::TrainConfig;
use crate::autodiff::{Graph, Rng, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::eval::eval_perplexity;
use crate::exec;
use crate::model::{
    save_checkpoint, stream_training_loss, stream_weight_total, Ctx, DropoutRates, ForwardOpts,
    ModelConfig, Params,
};
use crate::seeds;
use crate::textpipe::{build_batches, slice_streams, PreparedDocument, SentenceStream, StreamSize};

/// Token dropout is disabled below this width (unstable for the smallest
/// models in the width sweep).
const TOKEN_DROPOUT_MIN_WIDTH: usize = 96;

#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub train: &'a [PreparedDocument],
    pub valid: &'a [PreparedDocument],
}

pub struct TrainReport<S> {
    pub best_params: Params<S>,
    pub best_val_ppl: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub optimizer_steps: usize,
    pub sentence_steps: u64,
    pub stopped_early: bool,
    pub metrics_csv: String,
    pub gates_csv: String,
    /// Path of the best checkpoint when an output directory was given.
    pub checkpoint_path: Option<PathBuf>,
}

struct StreamGrad<S> {
    grads: Vec<Tensor<S>>,
    loss_contrib: f64,
    lexical_nll: f64,
    lexical_tokens: usize,
}

/// Gradients and stats for one batch: streams are independent, so each worker
/// forwards and backwards its own stream graph seeded by `weight/batch_weight`,
/// and the per-stream gradients sum (in input order) to the batch gradient of
/// the pooled weighted cross-entropy.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradients<S: Scalar>(
    params: &Params<S>,
    streams: &[&SentenceStream],
    eos_w: f64,
    rates: DropoutRates,
    dropout_seed: u64,
    mode: exec::Mode,
) -> Result<(Vec<Tensor<S>>, BatchStats)> {
    let cfg = &params.config;
    let weights: Vec<f64> = streams
        .iter()
        .map(|s| stream_weight_total(cfg, &s.sentences, eos_w))
        .collect();
    let batch_weight: f64 = weights.iter().sum();
    if batch_weight <= 0.0 {
        return Err(Error::invalid("batch carries no supervised positions"));
    }

    let results = exec::map_indexed(mode, streams, |i, stream| -> Result<StreamGrad<S>> {
        let mut g: Graph<S> = Graph::new();
        let bound = params.bind(&mut g, true);
        let opts = ForwardOpts::train(rates);
        let ctx = Ctx {
            cfg,
            schema: &params.schema,
            bound: &bound,
            opts: &opts,
        };
        let mut rng = Rng::seed_from_u64(seeds::derive2(dropout_seed, seeds::DROPOUT, i as u64, 0));
        let out = stream_training_loss(&mut g, ctx, &stream.sentences, eos_w, &mut rng)?;
        let seed = S::from_f64(out.weight_total / batch_weight);
        let mut grads = g.backward_seeded(out.loss, seed)?;
        let collected = bound.collect_grads(&g, &mut grads);
        Ok(StreamGrad {
            grads: collected,
            loss_contrib: g.value(out.loss).item().to_f64() * out.weight_total / batch_weight,
            lexical_nll: out.lexical_nll,
            lexical_tokens: out.lexical_tokens,
        })
    });

    let mut total: Option<Vec<Tensor<S>>> = None;
    let mut stats = BatchStats {
        loss: 0.0,
        lexical_nll: 0.0,
        lexical_tokens: 0,
        n_sentences: streams.iter().map(|s| s.sentences.len()).sum(),
    };
    for r in results {
        let sg = r?;
        stats.loss += sg.loss_contrib;
        stats.lexical_nll += sg.lexical_nll;
        stats.lexical_tokens += sg.lexical_tokens;
        match &mut total {
            None => total = Some(sg.grads),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&sg.grads) {
                    a.add_assign(b);
                }
            }
        }
    }
    Ok((total.unwrap(), stats))
}

/// Respan documents for the fixed-span variants; otherwise check the tensor
/// length matches the model.
fn adapt_documents(cfg: &ModelConfig, docs: &[PreparedDocument]) -> Result<Vec<PreparedDocument>> {
    match cfg.variant.fixed_span() {
        Some(n) => docs
            .iter()
            .map(|d| crate::textpipe::respan_document(d, n, cfg.effective_cap()))
            .collect(),
        None => {
            for d in docs {
                for s in &d.sentences {
                    if s.len() != cfg.tensor_len() {
                        return Err(Error::Config(format!(
                            "prepared data has tensor length {}, model expects {} \
                             (lexical_cap mismatch)",
                            s.len(),
                            cfg.tensor_len()
                        )));
                    }
                }
            }
            Ok(docs.to_vec())
        }
    }
}

fn effective_rates(cfg: &ModelConfig, warmin: f64) -> DropoutRates {
    let token = if cfg.d_model < TOKEN_DROPOUT_MIN_WIDTH {
        0.0
    } else {
        cfg.dropout_token * warmin
    };
    DropoutRates {
        token,
        sentence_rep: cfg.dropout_sentence_rep * warmin,
        attention: cfg.dropout_attention,
    }
}

/// Train a model, keeping the checkpoint with the lowest validation
/// perplexity. Deterministic for a fixed seed and thread-count independent.
pub fn train<S: Scalar>(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &TrainData,
    out_dir: Option<&Path>,
    mode: exec::Mode,
) -> Result<TrainReport<S>> {
    model_cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("no training documents"));
    }
    if data.valid.is_empty() {
        return Err(Error::invalid("no validation documents"));
    }
    let train_docs = adapt_documents(model_cfg, data.train)?;
    let valid_docs = adapt_documents(model_cfg, data.valid)?;

    let mut params: Params<S> =
        Params::init(model_cfg, seeds::derive(train_cfg.seed, seeds::INIT))?;
    let mut opt = OptState::new(&params);
    let mut stopper = EarlyStopper::new(train_cfg.early_stop_min_delta, train_cfg.early_stop_patience);

    let mut metrics = String::from("epoch,step,sentence_step,split,loss_nats,ppl_lexical,lr,S,eos_w\n");
    let mut gates = String::from("step,layer,gate_value\n");

    let mut best_params = params.clone();
    let mut best_val_ppl = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut step = 0usize;
    let mut sentence_steps = 0u64;
    let mut total_steps_estimate = 0usize;
    let mut current_s = 0usize;
    let mut streams: Vec<SentenceStream> = Vec::new();
    let mut stopped_early = false;
    let mut epochs_run = 0usize;
    let checkpoint_path = out_dir.map(|d| d.join("best.tgck"));
    let mut hit_step_cap = false;

    'epochs: for epoch in 1..=train_cfg.epochs_max {
        epochs_run = epoch;
        let s = curriculum_s(epoch, train_cfg);
        if s != current_s {
            current_s = s;
            streams.clear();
            for doc in &train_docs {
                streams.extend(slice_streams(doc, s)?);
            }
        }
        let sizes: Vec<StreamSize> = streams.iter().map(StreamSize::of).collect();
        let mut batch_rng =
            Rng::seed_from_u64(seeds::derive2(train_cfg.seed, seeds::DATA, epoch as u64, 0));
        let plan = build_batches(
            &sizes,
            train_cfg.batch_budget,
            train_cfg.max_streams,
            train_cfg.bucket_width,
            &mut batch_rng,
        )?;
        if epoch == 1 {
            // One cosine schedule for the whole run, estimated from the
            // initial chunking; it does not restart on re-chunking.
            total_steps_estimate = plan.n_batches() * train_cfg.epochs_max;
        }
        let eos_w = eos_weight(epoch, train_cfg);

        for (bi, batch) in plan.batches.iter().enumerate() {
            if let Some(cap) = train_cfg.max_steps {
                if step >= cap {
                    hit_step_cap = true;
                    break 'epochs;
                }
            }
            let rates = effective_rates(model_cfg, dropout_warmin(sentence_steps, train_cfg));
            let lr = lr_at(step, total_steps_estimate, train_cfg);
            let members: Vec<&SentenceStream> = batch.iter().map(|&i| &streams[i]).collect();
            let dropout_seed =
                seeds::derive2(train_cfg.seed, seeds::DROPOUT, epoch as u64, bi as u64);
            let (mut grads, stats) =
                batch_gradients(&params, &members, eos_w, rates, dropout_seed, mode)?;
            if !stats.loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {} step {}",
                    epoch, step
                )));
            }
            let grad_norm = clip_gradients(&mut grads, train_cfg.clip_norm);
            if !grad_norm.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite gradient norm at epoch {} step {}",
                    epoch, step
                )));
            }
            adamw_step(&mut params, &grads, &mut opt, lr, train_cfg)?;
            step += 1;
            sentence_steps += stats.n_sentences as u64;

            if step % train_cfg.log_every == 0 || bi + 1 == plan.n_batches() {
                let train_ppl = if stats.lexical_tokens > 0 {
                    (stats.lexical_nll / stats.lexical_tokens as f64).exp()
                } else {
                    f64::NAN
                };
                let _ = writeln!(
                    metrics,
                    "{},{},{},train,{:.6},{:.4},{:.6e},{},{}",
                    epoch, step, sentence_steps, stats.loss, train_ppl, lr, s, eos_w
                );
            }
        }

        let val = eval_perplexity(&params, &valid_docs, mode)?;
        let _ = writeln!(
            metrics,
            "{},{},{},valid,{:.6},{:.4},{:.6e},{},{}",
            epoch,
            step,
            sentence_steps,
            val.ppl.ln(),
            val.ppl,
            lr_at(step, total_steps_estimate, train_cfg),
            s,
            eos_w
        );
        for (layer, gate) in params.gate_values() {
            let _ = writeln!(gates, "{},{},{:.6}", sentence_steps, layer, gate);
        }

        if val.ppl < best_val_ppl {
            best_val_ppl = val.ppl;
            best_epoch = epoch;
            best_params = params.clone();
            if let Some(path) = &checkpoint_path {
                save_checkpoint(path, &best_params.cast::<f32>(), None)?;
            }
        }
        if stopper.observe(val.ppl) {
            stopped_early = true;
            break;
        }
    }

    // A pure smoke run capped before the first validation keeps the final
    // weights.
    if best_epoch == 0 && hit_step_cap {
        best_params = params.clone();
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), &metrics)?;
        std::fs::write(dir.join("gates.csv"), &gates)?;
    }

    Ok(TrainReport {
        best_params,
        best_val_ppl,
        best_epoch,
        epochs_run,
        optimizer_steps: step,
        sentence_steps,
        stopped_early,
        metrics_csv: metrics,
        gates_csv: gates,
        checkpoint_path,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct BatchStats {
    /// Pooled weighted cross-entropy actually optimized.
    pub loss: f64,
    pub lexical_nll: f64,
    pub lexical_tokens: usize,
    pub n_sentences: usize,
}
