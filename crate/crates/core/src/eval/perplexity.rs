//! Lexical-only perplexity: exp of the mean negative log-likelihood over
//! lexical label positions, pooled across whole (never sliced) documents,
//! with the memory reset per document and no dropout.

use std::collections::VecDeque;

use rand::SeedableRng as _;

use crate::autodiff::{Graph, Rng, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{
    flagged_nll, flatten_stream, forward_decoder, forward_sentence_step, shifted_targets, Ctx,
    ForwardOpts, Memory, Params,
};
use crate::textpipe::{PreparedDocument, SentenceTensor};

#[derive(Clone, Copy, Debug)]
pub struct PplReport {
    pub ppl: f64,
    pub nll_sum: f64,
    pub lexical_tokens: usize,
}

/// Evaluation-mode sentence stepper: one fresh graph per step, memory carried
/// across steps as plain value rows. Values match the training-mode forward
/// with dropout off; only the differentiation history is dropped.
pub struct SentenceStepper<'p, S: Scalar> {
    params: &'p Params<S>,
    memory: VecDeque<Tensor<S>>,
    rng: Rng,
}

impl<'p, S: Scalar> SentenceStepper<'p, S> {
    pub fn new(params: &'p Params<S>) -> Self {
        SentenceStepper {
            params,
            memory: VecDeque::new(),
            rng: Rng::seed_from_u64(0),
        }
    }

    /// Drop the memory (stream/document boundary).
    pub fn reset(&mut self) {
        self.memory.clear();
    }

    /// Run one sentence step; returns the full T x V logits.
    pub fn step(&mut self, sentence: &SentenceTensor) -> Result<Tensor<S>> {
        let mut g: Graph<S> = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let opts = ForwardOpts::eval();
        let ctx = Ctx {
            cfg: &self.params.config,
            schema: &self.params.schema,
            bound: &bound,
            opts: &opts,
        };
        let entries: Vec<_> = self
            .memory
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect();
        let mut memory = Memory::from_vars(entries, self.params.config.memory_capacity);
        let out = forward_sentence_step(&mut g, ctx, sentence, &mut memory, &mut self.rng)?;
        let logits = g.value(out.logits).clone();
        self.memory = memory.vars().iter().map(|&v| g.value(v).clone()).collect();
        Ok(logits)
    }
}

fn document_nll<S: Scalar>(params: &Params<S>, doc: &PreparedDocument) -> Result<(f64, usize)> {
    let cfg = &params.config;
    let mut nll = 0.0;
    let mut count = 0usize;
    if cfg.variant.is_decoder() {
        let flat = flatten_stream(&doc.sentences, cfg.variant.keeps_boundaries());
        let mut rng = Rng::seed_from_u64(0);
        for window in flat.chunks(cfg.context_window) {
            if window.len() < 2 {
                continue;
            }
            let mut g: Graph<S> = Graph::new();
            let bound = params.bind(&mut g, false);
            let opts = ForwardOpts::eval();
            let ctx = Ctx {
                cfg,
                schema: &params.schema,
                bound: &bound,
                opts: &opts,
            };
            let logits = forward_decoder(&mut g, ctx, window, &mut rng)?;
            let (targets, _, lexical) = shifted_targets::<S>(window, 1.0);
            let (s, c) = flagged_nll(g.value(logits), &targets, &lexical);
            nll += s;
            count += c;
        }
    } else {
        let mut stepper = SentenceStepper::new(params);
        for sentence in &doc.sentences {
            let logits = stepper.step(sentence)?;
            let (targets, _, lexical) = shifted_targets::<S>(&sentence.ids, 1.0);
            let (s, c) = flagged_nll(&logits, &targets, &lexical);
            nll += s;
            count += c;
        }
    }
    Ok((nll, count))
}

/// Pooled lexical perplexity across documents. Fixed-span variants repackage
/// each document into spans first (the model's own data protocol).
pub fn eval_perplexity<S: Scalar>(
    params: &Params<S>,
    docs: &[PreparedDocument],
    mode: exec::Mode,
) -> Result<PplReport> {
    if docs.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty document set"));
    }
    let cfg = &params.config;
    let prepared: Vec<PreparedDocument> = match cfg.variant.fixed_span() {
        Some(n) => docs
            .iter()
            .map(|d| crate::textpipe::respan_document(d, n, cfg.effective_cap()))
            .collect::<Result<_>>()?,
        None => docs.to_vec(),
    };
    for d in &prepared {
        for s in &d.sentences {
            if s.len() != cfg.tensor_len() && !cfg.variant.is_decoder() {
                return Err(Error::invalid(format!(
                    "document {} has tensors of length {}, model expects {}",
                    d.doc_id,
                    s.len(),
                    cfg.tensor_len()
                )));
            }
        }
    }
    let results = exec::map_indexed(mode, &prepared, |_, doc| document_nll(params, doc));
    let mut nll_sum = 0.0;
    let mut lexical_tokens = 0usize;
    for r in results {
        let (s, c) = r?;
        nll_sum += s;
        lexical_tokens += c;
    }
    if lexical_tokens == 0 {
        return Err(Error::invalid("no lexical label positions to evaluate"));
    }
    Ok(PplReport {
        ppl: (nll_sum / lexical_tokens as f64).exp(),
        nll_sum,
        lexical_tokens,
    })
}
