//! Forward passes: sentence steps with memory read/write, full streams with
//! the training loss, and the flat-decoder baselines (plain, boundary-biased,
//! and gist-masked).

use std::collections::VecDeque;

use super::config::{LayerKind, ModelConfig, Variant};
use super::params::{AttnIx, Bound, NormIx, Schema};
use crate::autodiff::{Graph, Rng, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::textpipe::{SentenceTensor, TokenKind, BOS, EOD, EOS};

const LN_EPS: f64 = 1e-5;
/// Fixed dropout rate inside multi-stage sentence heads.
const SENT_HEAD_INNER_DROPOUT: f64 = 0.1;

/// Effective dropout rates for one forward pass (already warm-in scaled;
/// all zero outside training).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutRates {
    pub token: f64,
    pub sentence_rep: f64,
    pub attention: f64,
}

impl DropoutRates {
    pub fn zero() -> Self {
        DropoutRates {
            token: 0.0,
            sentence_rep: 0.0,
            attention: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOpts {
    pub training: bool,
    pub rates: DropoutRates,
    /// Rebuild the shared memory key/value projection inputs inside every
    /// cross layer instead of once per step (equivalence testing only).
    pub rebuild_memory_kv_per_layer: bool,
    /// Skip every memory read path while keeping extraction, writes, and
    /// seeding intact. Verifies that the gated read is the only
    /// memory-to-token channel.
    pub disable_memory_reads: bool,
}

impl ForwardOpts {
    pub fn eval() -> Self {
        ForwardOpts {
            training: false,
            rates: DropoutRates::zero(),
            rebuild_memory_kv_per_layer: false,
            disable_memory_reads: false,
        }
    }

    pub fn train(rates: DropoutRates) -> Self {
        ForwardOpts {
            training: true,
            rates,
            rebuild_memory_kv_per_layer: false,
            disable_memory_reads: false,
        }
    }
}

/// Borrowed model context for one graph.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    pub cfg: &'a ModelConfig,
    pub schema: &'a Schema,
    pub bound: &'a Bound,
    pub opts: &'a ForwardOpts,
}

impl<'a> Ctx<'a> {
    fn var(&self, ix: usize) -> Var {
        self.bound.var(ix)
    }
}

/// Rolling sentence memory: ordered oldest to newest, FIFO eviction at
/// capacity. Entries are 1 x d rows on the current graph and keep their
/// differentiation history unless the variant detaches at write time.
pub struct Memory {
    entries: VecDeque<Var>,
    capacity: usize,
}

impl Memory {
    pub fn new(capacity: usize) -> Memory {
        Memory {
            entries: VecDeque::new(),
            capacity,
        }
    }

    /// Rebuild from carried values (evaluation windows re-register entries
    /// as constants on a fresh graph).
    pub fn from_vars(vars: Vec<Var>, capacity: usize) -> Memory {
        Memory {
            entries: vars.into(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn newest(&self) -> Option<Var> {
        self.entries.back().copied()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().copied().collect()
    }

    pub fn push(&mut self, m: Var) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(m);
    }
}

/// Sinusoidal slot encodings for memory keys, slot 1 = oldest entry.
pub fn sentence_position_encoding<S: Scalar>(k: usize, d: usize) -> Tensor<S> {
    let mut t = Tensor::zeros(k, d);
    for s in 1..=k {
        let row = t.row_mut(s - 1);
        for j in 0..d {
            let pair = (j / 2) as f64;
            let angle = s as f64 / 10000f64.powf(2.0 * pair / d as f64);
            row[j] = S::from_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

/// Shared per-step memory key/value inputs: keys carry slot sinusoids, values
/// are the raw entry rows. Projections stay per cross layer.
pub struct MemoryKv {
    pub keys: Var,
    pub values: Var,
    pub len: usize,
}

/// Stack the memory into cached key/value inputs; `None` when empty.
pub fn build_memory_kv<S: Scalar>(g: &mut Graph<S>, memory: &Memory, d: usize) -> Result<Option<MemoryKv>> {
    if memory.is_empty() {
        return Ok(None);
    }
    let raw = g.concat_rows(&memory.vars())?;
    let pos = g.constant(sentence_position_encoding::<S>(memory.len(), d));
    let keys = g.add(raw, pos)?;
    Ok(Some(MemoryKv {
        keys,
        values: raw,
        len: memory.len(),
    }))
}

/// Additive attention bias: `prefix` always-visible columns (memory rows),
/// then causal attention over valid (non-pad) sentence positions.
pub fn causal_pad_mask<S: Scalar>(valid: &[bool], prefix: usize) -> Tensor<S> {
    let t = valid.len();
    let neg = S::mask_neg();
    let mut mask = Tensor::zeros(t, prefix + t);
    for i in 0..t {
        let row = mask.row_mut(i);
        for (j, &ok) in valid.iter().enumerate() {
            if j > i || !ok {
                row[prefix + j] = neg;
            }
        }
    }
    mask
}

fn maybe_dropout<S: Scalar>(
    g: &mut Graph<S>,
    v: Var,
    rate: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<Var> {
    if training && rate > 0.0 {
        g.dropout(v, rate, rng, true)
    } else {
        Ok(v)
    }
}

fn layer_norm_at<S: Scalar>(g: &mut Graph<S>, ctx: Ctx, x: Var, norm: NormIx) -> Result<Var> {
    g.layer_norm(x, ctx.var(norm.gain), ctx.var(norm.bias), S::from_f64(LN_EPS))
}

/// Multi-head self-attention increment (pre-residual): keys and values come
/// from the same rows as the queries.
fn attention<S: Scalar>(
    g: &mut Graph<S>,
    ctx: Ctx,
    attn: &AttnIx,
    q_input: Var,
    kv_input: Var,
    mask: Option<&Tensor<S>>,
    rng: &mut Rng,
) -> Result<Var> {
    attention_kv_split(g, ctx, attn, q_input, kv_input, kv_input, mask, rng)
}

/// Input embedding with context seeding: token embeddings plus learned
/// positions; when the variant seeds and the memory is non-empty, row 0
/// becomes the newest sentence vector plus the position-0 embedding.
pub fn embed_and_seed<S: Scalar>(
    g: &mut Graph<S>,
    ctx: Ctx,
    sentence: &SentenceTensor,
    memory: &Memory,
) -> Result<Var> {
    let t = sentence.len();
    let tok = g.gather_rows(ctx.var(ctx.schema.embed_tok), &sentence.ids)?;
    let pos = ctx.var(ctx.schema.embed_pos);
    let x = g.add(tok, pos)?;
    if !ctx.cfg.variant.uses_seeding() {
        return Ok(x);
    }
    match memory.newest() {
        None => Ok(x),
        Some(prev) => {
            let p0 = g.slice_rows(pos, 0, 1)?;
            let row0 = g.add(prev, p0)?;
            let rest = g.slice_rows(x, 1, t - 1)?;
            g.concat_rows(&[row0, rest])
        }
    }
}

/// Attention where keys and values come from different inputs (memory keys
/// carry position sinusoids, values do not).
#[allow(clippy::too_many_arguments)]
fn attention_kv_split<S: Scalar>(
    g: &mut Graph<S>,
    ctx: Ctx,
    attn: &AttnIx,
    q_input: Var,
    key_input: Var,
    value_input: Var,
    mask: Option<&Tensor<S>>,
    rng: &mut Rng,
) -> Result<Var> {
    let dh = ctx.cfg.d_head();
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());

    let q = g.matmul(q_input, ctx.var(attn.w_q))?;
    let q = g.add_bias(q, ctx.var(attn.b_q))?;
    let k = g.matmul(key_input, ctx.var(attn.w_k))?;
    let k = g.add_bias(k, ctx.var(attn.b_k))?;
    let v = g.matmul(value_input, ctx.var(attn.w_v))?;
    let v = g.add_bias(v, ctx.var(attn.b_v))?;

    let mut heads = Vec::with_capacity(ctx.cfg.n_heads);
    for h in 0..ctx.cfg.n_heads {
        let q_h = g.slice_cols(q, h * dh, dh)?;
        let k_h = g.slice_cols(k, h * dh, dh)?;
        let v_h = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_nt(q_h, k_h)?;
        let scores = g.scale(scores, scale);
        let probs = g.row_softmax(scores, mask)?;
        let probs = maybe_dropout(g, probs, ctx.opts.rates.attention, rng, ctx.opts.training)?;
        heads.push(g.matmul(probs, v_h)?);
    }
    let merged = g.concat_cols(&heads)?;
    let out = g.matmul(merged, ctx.var(attn.w_o))?;
    g.add_bias(out, ctx.var(attn.b_o))
}

fn ffn_increment<S: Scalar>(g: &mut Graph<S>, ctx: Ctx, layer: usize, normed: Var) -> Result<Var> {
    let ffn = &ctx.schema.layers[layer].ffn;
    let h = g.matmul(normed, ctx.var(ffn.w1))?;
    let h = g.add_bias(h, ctx.var(ffn.b1))?;
    let h = g.gelu(h);
    let out = g.matmul(h, ctx.var(ffn.w2))?;
    g.add_bias(out, ctx.var(ffn.b2))
}

/// Sentence head: dropout on the EOS hidden row, then the linear stage(s).
fn sentence_head<S: Scalar>(g: &mut Graph<S>, ctx: Ctx, eos_row: Var, rng: &mut Rng) -> Result<Var> {
    let mut h = maybe_dropout(g, eos_row, ctx.opts.rates.sentence_rep, rng, ctx.opts.training)?;
    let stages = &ctx.schema.sent_head;
    for (i, &w) in stages.iter().enumerate() {
        h = g.matmul(h, ctx.var(w))?;
        if i + 1 < stages.len() {
            h = g.gelu(h);
            h = maybe_dropout(g, h, SENT_HEAD_INNER_DROPOUT, rng, ctx.opts.training)?;
        }
    }
    Ok(h)
}

pub struct StepOutput {
    /// T x V next-token logits (tied output head over the token embedding).
    pub logits: Var,
    /// The sentence vector as written to memory (detached when the variant
    /// detaches writes).
    pub sentence_vec: Var,
}

/// One sentence step: run the stack over a sentence tensor while reading the
/// memory, extract the sentence vector at the extraction layer, and write it
/// to memory (FIFO, detach first iff the variant says so).
pub fn forward_sentence_step<S: Scalar>(
    g: &mut Graph<S>,
    ctx: Ctx,
    sentence: &SentenceTensor,
    memory: &mut Memory,
    rng: &mut Rng,
) -> Result<StepOutput> {
    let cfg = ctx.cfg;
    if cfg.variant.is_decoder() {
        return Err(Error::invalid(
            "decoder variants take token streams, not sentence steps",
        ));
    }
    let t = sentence.len();
    if t != cfg.tensor_len() {
        return Err(Error::invalid(format!(
            "sentence tensor length {} does not match the configured {}",
            t,
            cfg.tensor_len()
        )));
    }

    let mut h = embed_and_seed(g, ctx, sentence, memory)?;
    if ctx.opts.training && ctx.opts.rates.token > 0.0 {
        let lexical: Vec<bool> = sentence.kinds().iter().map(|k| k.is_lexical()).collect();
        h = g.dropout_rows(h, ctx.opts.rates.token, rng, true, &lexical)?;
    }

    let self_mask = causal_pad_mask::<S>(&sentence.valid_mask(), 0);
    let in_context = cfg.variant == Variant::TgIncontext;
    let prefix_mask = if in_context && !memory.is_empty() && !ctx.opts.disable_memory_reads {
        Some(causal_pad_mask::<S>(&sentence.valid_mask(), memory.len()))
    } else {
        None
    };
    let mut kv = if ctx.opts.disable_memory_reads {
        None
    } else {
        build_memory_kv(g, memory, cfg.d_model)?
    };

    let extraction = cfg.extraction_layer();
    let mut sentence_vec: Option<Var> = None;
    for (li, layer) in ctx.schema.layers.iter().enumerate() {
        if ctx.opts.rebuild_memory_kv_per_layer
            && layer.kind.has_cross()
            && !ctx.opts.disable_memory_reads
        {
            kv = build_memory_kv(g, memory, cfg.d_model)?;
        }
        match layer.kind {
            LayerKind::SelfOnly => {
                let normed = layer_norm_at(g, ctx, h, layer.norm_attn)?;
                let attn = layer.self_attn.as_ref().unwrap();
                let inc = attention(g, ctx, attn, normed, normed, Some(&self_mask), rng)?;
                h = g.add(h, inc)?;
            }
            LayerKind::SelfWithMemoryPrefix => {
                let normed = layer_norm_at(g, ctx, h, layer.norm_attn)?;
                let attn = layer.self_attn.as_ref().unwrap();
                let inc = match (&kv, &prefix_mask) {
                    (Some(kv), Some(pmask)) => {
                        let k_in = g.concat_rows(&[kv.keys, normed])?;
                        let v_in = g.concat_rows(&[kv.values, normed])?;
                        attention_kv_split(g, ctx, attn, normed, k_in, v_in, Some(pmask), rng)?
                    }
                    _ => attention(g, ctx, attn, normed, normed, Some(&self_mask), rng)?,
                };
                h = g.add(h, inc)?;
            }
            LayerKind::CrossOnly => {
                if let Some(kv) = &kv {
                    let normed = layer_norm_at(g, ctx, h, layer.norm_attn)?;
                    let attn = layer.cross_attn.as_ref().unwrap();
                    let inc =
                        attention_kv_split(g, ctx, attn, normed, kv.keys, kv.values, None, rng)?;
                    let gated = g.scale_by_scalar(inc, ctx.var(layer.gate.unwrap()))?;
                    h = g.add(h, gated)?;
                }
            }
            LayerKind::SelfThenCross => {
                let normed = layer_norm_at(g, ctx, h, layer.norm_attn)?;
                let attn = layer.self_attn.as_ref().unwrap();
                let inc = attention(g, ctx, attn, normed, normed, Some(&self_mask), rng)?;
                h = g.add(h, inc)?;
                if let Some(kv) = &kv {
                    let normed = layer_norm_at(g, ctx, h, layer.norm_cross.unwrap())?;
                    let attn = layer.cross_attn.as_ref().unwrap();
                    let inc =
                        attention_kv_split(g, ctx, attn, normed, kv.keys, kv.values, None, rng)?;
                    let gated = g.scale_by_scalar(inc, ctx.var(layer.gate.unwrap()))?;
                    h = g.add(h, gated)?;
                }
            }
            LayerKind::ParallelBoth => {
                let normed = layer_norm_at(g, ctx, h, layer.norm_attn)?;
                let attn = layer.self_attn.as_ref().unwrap();
                let inc = attention(g, ctx, attn, normed, normed, Some(&self_mask), rng)?;
                h = g.add(h, inc)?;
                if let Some(kv) = &kv {
                    let attn = layer.cross_attn.as_ref().unwrap();
                    let inc =
                        attention_kv_split(g, ctx, attn, normed, kv.keys, kv.values, None, rng)?;
                    let gated = g.scale_by_scalar(inc, ctx.var(layer.gate.unwrap()))?;
                    h = g.add(h, gated)?;
                }
            }
        }
        let normed = layer_norm_at(g, ctx, h, layer.norm_ffn)?;
        let inc = ffn_increment(g, ctx, li, normed)?;
        h = g.add(h, inc)?;

        if li + 1 == extraction {
            let eos_row = g.slice_rows(h, t - 1, 1)?;
            sentence_vec = Some(sentence_head(g, ctx, eos_row, rng)?);
        }
    }

    let final_normed = layer_norm_at(
        g,
        ctx,
        h,
        NormIx {
            gain: ctx.schema.final_norm.gain,
            bias: ctx.schema.final_norm.bias,
        },
    )?;
    let logits = g.matmul_nt(final_normed, ctx.var(ctx.schema.embed_tok))?;

    let m = sentence_vec.expect("extraction layer within 1..=n_layers");
    let written = if ctx.cfg.variant.detaches_memory_writes() {
        g.detach(m)
    } else {
        m
    };
    memory.push(written);
    Ok(StepOutput {
        logits,
        sentence_vec: written,
    })
}

// ---- targets, weights, losses ---------------------------------------------

/// Next-token targets (ids shifted by one) with loss weights: lexical 1.0,
/// EOS/EOD the epoch's boundary weight, PAD zero. The flags mark lexical
/// label positions, the only ones counted in reported metrics.
pub fn shifted_targets<S: Scalar>(
    ids: &[u32],
    eos_weight: f64,
) -> (Vec<u32>, Vec<S>, Vec<bool>) {
    let n = ids.len() - 1;
    let mut targets = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut lexical = Vec::with_capacity(n);
    for i in 0..n {
        let target = ids[i + 1];
        targets.push(target);
        let kind = TokenKind::of(target);
        weights.push(match kind {
            TokenKind::Lexical | TokenKind::Bos => S::ONE,
            TokenKind::Eos | TokenKind::Eod => S::from_f64(eos_weight),
            TokenKind::Pad => S::ZERO,
        });
        lexical.push(kind.is_lexical());
    }
    (targets, weights, lexical)
}

/// Mean negative log-likelihood over flagged label positions, computed from
/// logit values outside any graph.
pub fn flagged_nll<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[u32],
    flags: &[bool],
) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (&t, &keep)) in targets.iter().zip(flags).enumerate() {
        if !keep {
            continue;
        }
        let row = logits.row(i);
        let mut max = row[0];
        for &x in row {
            if x > max {
                max = x;
            }
        }
        let mut denom = 0.0f64;
        for &x in row {
            denom += (x - max).to_f64().exp();
        }
        sum += denom.ln() + max.to_f64() - row[t as usize].to_f64();
        count += 1;
    }
    (sum, count)
}

pub struct StreamLoss {
    /// Weighted training loss for this stream (normalized by its own weight
    /// total). Scale the backward seed by `weight_total / batch_weight_total`
    /// to fold streams into a batch objective exactly.
    pub loss: Var,
    pub weight_total: f64,
    pub lexical_nll: f64,
    pub lexical_tokens: usize,
}

/// Total loss weight a stream contributes, computable without a forward pass.
pub fn stream_weight_total(cfg: &ModelConfig, stream: &[SentenceTensor], eos_weight: f64) -> f64 {
    if cfg.variant.is_decoder() {
        let flat = flatten_stream(stream, cfg.variant.keeps_boundaries());
        window_chunks(&flat, cfg.context_window)
            .into_iter()
            .filter(|w| w.len() >= 2)
            .map(|w| {
                let (_, weights, _) = shifted_targets::<f64>(w, eos_weight);
                weights.iter().sum::<f64>()
            })
            .sum()
    } else {
        stream
            .iter()
            .map(|s| {
                let (_, weights, _) = shifted_targets::<f64>(&s.ids, eos_weight);
                weights.iter().sum::<f64>()
            })
            .sum()
    }
}

/// Forward a whole stream under one memory lifetime and assemble the training
/// loss (weighted cross-entropy pooled across sentence steps).
pub fn stream_training_loss<S: Scalar>(
    g: &mut Graph<S>,
    ctx: Ctx,
    stream: &[SentenceTensor],
    eos_weight: f64,
    rng: &mut Rng,
) -> Result<StreamLoss> {
    if stream.is_empty() {
        return Err(Error::invalid("cannot forward an empty stream"));
    }
    if ctx.cfg.variant.is_decoder() {
        return decoder_training_loss(g, ctx, stream, eos_weight, rng);
    }

    let mut memory = Memory::new(ctx.cfg.memory_capacity);
    let mut pieces: Vec<(Var, f64)> = Vec::with_capacity(stream.len());
    let mut lexical_nll = 0.0;
    let mut lexical_tokens = 0usize;
    for sentence in stream {
        let out = forward_sentence_step(g, ctx, sentence, &mut memory, rng)?;
        let (targets, weights, lexical) = shifted_targets::<S>(&sentence.ids, eos_weight);
        let n = targets.len();
        let rows = g.slice_rows(out.logits, 0, n)?;
        let w_total: f64 = weights.iter().map(|w| w.to_f64()).sum();
        let wce = g.weighted_cross_entropy(rows, &targets, &weights)?;
        pieces.push((wce, w_total));
        let (nll, count) = flagged_nll(g.value(out.logits), &targets, &lexical);
        lexical_nll += nll;
        lexical_tokens += count;
    }
    let weight_total: f64 = pieces.iter().map(|(_, w)| w).sum();
    let mut loss: Option<Var> = None;
    for (wce, w) in pieces {
        let scaled = g.scale(wce, S::from_f64(w / weight_total));
        loss = Some(match loss {
            None => scaled,
            Some(acc) => g.add(acc, scaled)?,
        });
    }
    Ok(StreamLoss {
        loss: loss.unwrap(),
        weight_total,
        lexical_nll,
        lexical_tokens,
    })
}

// ---- decoder baselines -----------------------------------------------------

/// Flatten a stream of sentence tensors into a token sequence. With
/// boundaries kept, each sentence contributes BOS + lexical + (EOD when
/// final) + EOS and pads are dropped; otherwise only the lexical tokens
/// survive.
pub fn flatten_stream(stream: &[SentenceTensor], keep_boundaries: bool) -> Vec<u32> {
    let mut out = Vec::new();
    for s in stream {
        if keep_boundaries {
            out.push(BOS);
        }
        out.extend_from_slice(s.lexical_ids());
        if keep_boundaries {
            if s.is_final {
                out.push(EOD);
            }
            out.push(EOS);
        }
    }
    out
}

/// Non-overlapping context windows.
pub fn window_chunks(ids: &[u32], window: usize) -> Vec<&[u32]> {
    ids.chunks(window).collect()
}

/// Per-position sentence indices and EOS flags for a boundary token stream.
pub fn sentence_annotations(ids: &[u32]) -> (Vec<usize>, Vec<bool>) {
    let mut sid = 0usize;
    let mut started = false;
    let mut sids = Vec::with_capacity(ids.len());
    let mut eos = Vec::with_capacity(ids.len());
    for &id in ids {
        if id == BOS && started {
            sid += 1;
        }
        started = true;
        sids.push(sid);
        eos.push(id == EOS);
    }
    (sids, eos)
}

/// Additive gist attention bias: cell (i, j) is open iff j is causally inside
/// i's sentence, or j is the EOS of an earlier sentence.
pub fn gist_mask<S: Scalar>(sentence_ids: &[usize], eos_flags: &[bool]) -> Tensor<S> {
    let n = sentence_ids.len();
    let neg = S::mask_neg();
    let mut mask = Tensor::zeros(n, n);
    for i in 0..n {
        let row = mask.row_mut(i);
        for j in 0..n {
            let same = sentence_ids[j] == sentence_ids[i] && j <= i;
            let gist = eos_flags[j] && sentence_ids[j] < sentence_ids[i];
            if !(same || gist) {
                row[j] = neg;
            }
        }
    }
    mask
}

/// Standard causal decoder over a token stream (window already sized to the
/// context limit). Applies the gist bias for the gist variant.
pub fn forward_decoder<S: Scalar>(
    g: &mut Graph<S>,
    ctx: Ctx,
    ids: &[u32],
    rng: &mut Rng,
) -> Result<Var> {
    let cfg = ctx.cfg;
    if !cfg.variant.is_decoder() {
        return Err(Error::invalid("forward_decoder requires a decoder variant"));
    }
    let n = ids.len();
    if n == 0 {
        return Err(Error::invalid("empty token window"));
    }
    if n > cfg.context_window {
        return Err(Error::invalid(format!(
            "window of {} tokens exceeds the context window {}",
            n, cfg.context_window
        )));
    }

    let tok = g.gather_rows(ctx.var(ctx.schema.embed_tok), ids)?;
    let pos = g.slice_rows(ctx.var(ctx.schema.embed_pos), 0, n)?;
    let mut h = g.add(tok, pos)?;

    let mask = if cfg.variant == Variant::Gpt2Gist {
        let (sids, eos) = sentence_annotations(ids);
        gist_mask::<S>(&sids, &eos)
    } else {
        causal_pad_mask::<S>(&vec![true; n], 0)
    };

    for (li, layer) in ctx.schema.layers.iter().enumerate() {
        let normed = layer_norm_at(g, ctx, h, layer.norm_attn)?;
        let attn = layer.self_attn.as_ref().unwrap();
        let inc = attention(g, ctx, attn, normed, normed, Some(&mask), rng)?;
        h = g.add(h, inc)?;
        let normed = layer_norm_at(g, ctx, h, layer.norm_ffn)?;
        let inc = ffn_increment(g, ctx, li, normed)?;
        h = g.add(h, inc)?;
    }
    let final_normed = layer_norm_at(
        g,
        ctx,
        h,
        NormIx {
            gain: ctx.schema.final_norm.gain,
            bias: ctx.schema.final_norm.bias,
        },
    )?;
    g.matmul_nt(final_normed, ctx.var(ctx.schema.embed_tok))
}

fn decoder_training_loss<S: Scalar>(
    g: &mut Graph<S>,
    ctx: Ctx,
    stream: &[SentenceTensor],
    eos_weight: f64,
    rng: &mut Rng,
) -> Result<StreamLoss> {
    let flat = flatten_stream(stream, ctx.cfg.variant.keeps_boundaries());
    let mut pieces: Vec<(Var, f64)> = Vec::new();
    let mut lexical_nll = 0.0;
    let mut lexical_tokens = 0usize;
    for window in window_chunks(&flat, ctx.cfg.context_window) {
        if window.len() < 2 {
            continue;
        }
        let logits = forward_decoder(g, ctx, window, rng)?;
        let (targets, weights, lexical) = shifted_targets::<S>(window, eos_weight);
        let rows = g.slice_rows(logits, 0, targets.len())?;
        let w_total: f64 = weights.iter().map(|w| w.to_f64()).sum();
        if w_total <= 0.0 {
            continue;
        }
        let wce = g.weighted_cross_entropy(rows, &targets, &weights)?;
        pieces.push((wce, w_total));
        let (nll, count) = flagged_nll(g.value(logits), &targets, &lexical);
        lexical_nll += nll;
        lexical_tokens += count;
    }
    if pieces.is_empty() {
        return Err(Error::invalid(
            "stream produced no supervised positions for the decoder",
        ));
    }
    let weight_total: f64 = pieces.iter().map(|(_, w)| w).sum();
    let mut loss: Option<Var> = None;
    for (wce, w) in pieces {
        let scaled = g.scale(wce, S::from_f64(w / weight_total));
        loss = Some(match loss {
            None => scaled,
            Some(acc) => g.add(acc, scaled)?,
        });
    }
    Ok(StreamLoss {
        loss: loss.unwrap(),
        weight_total,
        lexical_nll,
        lexical_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::Params;
    use crate::textpipe::{package_ids, BYTE_BASE, PAD};
    use rand::SeedableRng as _;

    fn tiny_cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            ffn_mult: 2,
            lexical_cap: 5,
            memory_capacity: 2,
            sentence_layer: 2,
            sentence_head_depth: 1,
            context_window: 64,
            variant,
            dropout_token: 0.0,
            dropout_sentence_rep: 0.0,
            dropout_attention: 0.0,
            gate_init: 1.0,
        }
    }

    fn sent(cfg: &ModelConfig, lex: &[u32], is_final: bool) -> SentenceTensor {
        package_ids(lex, cfg.effective_cap(), is_final).unwrap()
    }

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!((a - b).abs() <= tol, "{}: {} vs {}", what, a, b);
    }

    struct Built<S> {
        params: Params<S>,
        opts: ForwardOpts,
    }

    impl<S: Scalar> Built<S> {
        fn new(cfg: &ModelConfig, seed: u64) -> Built<S> {
            Built {
                params: Params::init(cfg, seed).unwrap(),
                opts: ForwardOpts::eval(),
            }
        }

        fn ctx<'a>(&'a self, bound: &'a Bound) -> Ctx<'a> {
            Ctx {
                cfg: &self.params.config,
                schema: &self.params.schema,
                bound,
                opts: &self.opts,
            }
        }
    }

    /// Run a stream in eval mode on one graph; return per-step logits values
    /// and the memory contents after the last step.
    fn run_stream_f64(
        built: &Built<f64>,
        stream: &[SentenceTensor],
    ) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
        let mut g: Graph<f64> = Graph::new();
        let bound = built.params.bind(&mut g, false);
        let ctx = built.ctx(&bound);
        let mut rng = Rng::seed_from_u64(0);
        let mut memory = Memory::new(built.params.config.memory_capacity);
        let mut logits = Vec::new();
        for s in stream {
            let out = forward_sentence_step(&mut g, ctx, s, &mut memory, &mut rng).unwrap();
            logits.push(g.value(out.logits).clone());
        }
        let mem = memory.vars().iter().map(|&v| g.value(v).clone()).collect();
        (logits, mem)
    }

    #[test]
    fn single_position_attention_matches_hand_path() {
        // d = 2, one head: with a single open position the softmax weight is
        // 1, so the increment is (x W_V + b_v) W_O + b_o.
        let cfg = ModelConfig {
            vocab_size: 8,
            n_layers: 1,
            d_model: 2,
            n_heads: 1,
            ffn_mult: 1,
            lexical_cap: 4,
            memory_capacity: 1,
            sentence_layer: 1,
            ..ModelConfig::default()
        };
        let built: Built<f64> = Built::new(&cfg, 3);
        let mut g: Graph<f64> = Graph::new();
        let bound = built.params.bind(&mut g, false);
        let ctx = built.ctx(&bound);
        let attn_ix = built.params.schema.layers[0].self_attn.unwrap();
        let x = g.leaf(Tensor::from_rows(&[vec![0.3, -0.7]]), false);
        let mut rng = Rng::seed_from_u64(0);
        let out = attention(&mut g, ctx, &attn_ix, x, x, None, &mut rng).unwrap();

        let wv = built.params.value(attn_ix.w_v);
        let bv = built.params.value(attn_ix.b_v);
        let wo = built.params.value(attn_ix.w_o);
        let bo = built.params.value(attn_ix.b_o);
        let v = [
            0.3 * wv.get(0, 0) - 0.7 * wv.get(1, 0) + bv.get(0, 0),
            0.3 * wv.get(0, 1) - 0.7 * wv.get(1, 1) + bv.get(0, 1),
        ];
        let expect = [
            v[0] * wo.get(0, 0) + v[1] * wo.get(1, 0) + bo.get(0, 0),
            v[0] * wo.get(0, 1) + v[1] * wo.get(1, 1) + bo.get(0, 1),
        ];
        let got = g.value(out);
        assert_close(got.get(0, 0), expect[0], 1e-12, "attn out[0]");
        assert_close(got.get(0, 1), expect[1], 1e-12, "attn out[1]");
    }

    #[test]
    fn identical_memory_entries_make_cross_reads_query_independent() {
        let cfg = ModelConfig {
            vocab_size: 16,
            n_layers: 2,
            d_model: 4,
            n_heads: 2,
            ffn_mult: 1,
            lexical_cap: 5,
            memory_capacity: 4,
            sentence_layer: 1,
            ..ModelConfig::default()
        };
        let built: Built<f64> = Built::new(&cfg, 5);
        let mut g: Graph<f64> = Graph::new();
        let bound = built.params.bind(&mut g, false);
        let ctx = built.ctx(&bound);
        let attn_ix = built.params.schema.layers[1].cross_attn.unwrap();

        let m_bar = vec![0.4, -0.2, 0.9, 0.1];
        let m = g.leaf(Tensor::row_vector(m_bar.clone()), false);
        let mut memory = Memory::new(4);
        for _ in 0..3 {
            memory.push(m);
        }
        let kv = build_memory_kv(&mut g, &memory, 4).unwrap().unwrap();
        let queries = g.leaf(
            Tensor::from_rows(&[
                vec![0.1, 0.2, 0.3, 0.4],
                vec![-1.0, 0.5, 0.0, 2.0],
                vec![0.0, 0.0, 0.0, 0.0],
            ]),
            false,
        );
        let mut rng = Rng::seed_from_u64(0);
        let out = attention_kv_split(
            &mut g, ctx, &attn_ix, queries, kv.keys, kv.values, None, &mut rng,
        )
        .unwrap();
        let got = g.value(out);

        // Softmax weights sum to 1 per head and every value row is m_bar, so
        // each output row equals (m_bar W_V + b_v) W_O + b_o.
        let wv = built.params.value(attn_ix.w_v);
        let bv = built.params.value(attn_ix.b_v);
        let wo = built.params.value(attn_ix.w_o);
        let bo = built.params.value(attn_ix.b_o);
        let mut v = vec![0.0; 4];
        for j in 0..4 {
            v[j] = (0..4).map(|i| m_bar[i] * wv.get(i, j)).sum::<f64>() + bv.get(0, j);
        }
        let mut expect = vec![0.0; 4];
        for j in 0..4 {
            expect[j] = (0..4).map(|i| v[i] * wo.get(i, j)).sum::<f64>() + bo.get(0, j);
        }
        for r in 0..3 {
            for j in 0..4 {
                assert_close(got.get(r, j), expect[j], 1e-10, "query-independent row");
            }
        }
    }

    #[test]
    fn memory_keys_carry_sinusoids_and_values_do_not() {
        let mut g: Graph<f64> = Graph::new();
        let d = 8;
        let m1 = g.leaf(
            Tensor::row_vector((0..d).map(|i| 0.3 * i as f64 - 1.0).collect()),
            false,
        );
        let m2 = g.leaf(
            Tensor::row_vector((0..d).map(|i| 0.7 - 0.2 * i as f64).collect()),
            false,
        );
        let mut memory = Memory::new(4);
        memory.push(m1);
        memory.push(m2);
        let kv = build_memory_kv(&mut g, &memory, d).unwrap().unwrap();
        assert_eq!(kv.len, 2);
        // V_M equals the stacked entries bitwise.
        let vals = g.value(kv.values);
        assert_eq!(vals.row(0), g.value(m1).row(0));
        assert_eq!(vals.row(1), g.value(m2).row(0));
        // K_M - V_M equals the closed-form sinusoid table.
        let keys = g.value(kv.keys);
        let pe: Tensor<f64> = sentence_position_encoding(2, d);
        for s in 0..2 {
            for j in 0..d {
                assert_close(
                    keys.get(s, j) - vals.get(s, j),
                    pe.get(s, j),
                    1e-12,
                    "sinusoid offset",
                );
            }
        }
        // Slot 1 (oldest) uses angle index 1: spot-check the closed form.
        assert_close(pe.get(0, 0), (1.0f64).sin(), 1e-12, "pe[1][0]");
        assert_close(pe.get(0, 1), (1.0f64).cos(), 1e-12, "pe[1][1]");
    }

    #[test]
    fn seeding_replaces_row_zero_with_previous_sentence_vector() {
        let cfg = tiny_cfg(Variant::Tg);
        let built: Built<f64> = Built::new(&cfg, 9);
        let mut g: Graph<f64> = Graph::new();
        let bound = built.params.bind(&mut g, false);
        let ctx = built.ctx(&bound);
        let s = sent(&cfg, &[BYTE_BASE, BYTE_BASE + 1], false);

        // Empty memory: row 0 is E[BOS] + P[0].
        let empty = Memory::new(2);
        let x0 = embed_and_seed(&mut g, ctx, &s, &empty).unwrap();
        let e = built.params.value(built.params.schema.embed_tok);
        let p = built.params.value(built.params.schema.embed_pos);
        for j in 0..cfg.d_model {
            assert_close(
                g.value(x0).get(0, j),
                e.get(1, j) + p.get(0, j),
                1e-12,
                "static BOS row",
            );
        }

        // Memory with one vector: row 0 is m1 + P[0]; other rows unchanged.
        let m1 = g.leaf(Tensor::row_vector((0..8).map(|i| 0.1 * i as f64).collect()), false);
        let mut memory = Memory::new(2);
        memory.push(m1);
        let x1 = embed_and_seed(&mut g, ctx, &s, &memory).unwrap();
        for j in 0..cfg.d_model {
            assert_close(
                g.value(x1).get(0, j),
                g.value(m1).get(0, j) + p.get(0, j),
                1e-12,
                "seeded row",
            );
            assert_close(
                g.value(x1).get(1, j),
                g.value(x0).get(1, j),
                1e-12,
                "lexical rows unchanged",
            );
        }
    }

    #[test]
    fn no_seed_variant_keeps_the_static_bos_row() {
        let cfg = tiny_cfg(Variant::TgNoSeed);
        let built: Built<f64> = Built::new(&cfg, 9);
        let mut g: Graph<f64> = Graph::new();
        let bound = built.params.bind(&mut g, false);
        let ctx = built.ctx(&bound);
        let s = sent(&cfg, &[BYTE_BASE], false);
        let empty = Memory::new(2);
        let a = embed_and_seed(&mut g, ctx, &s, &empty).unwrap();
        let m1 = g.leaf(Tensor::row_vector(vec![9.0; 8]), false);
        let mut memory = Memory::new(2);
        memory.push(m1);
        let b = embed_and_seed(&mut g, ctx, &s, &memory).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn fifo_eviction_keeps_the_two_newest_vectors() {
        let cfg = tiny_cfg(Variant::Tg);
        let built: Built<f64> = Built::new(&cfg, 21);
        let stream = vec![
            sent(&cfg, &[BYTE_BASE, BYTE_BASE + 1], false),
            sent(&cfg, &[BYTE_BASE + 2], false),
            sent(&cfg, &[BYTE_BASE + 3, BYTE_BASE + 4], true),
        ];
        let mut g: Graph<f64> = Graph::new();
        let bound = built.params.bind(&mut g, false);
        let ctx = built.ctx(&bound);
        let mut rng = Rng::seed_from_u64(0);
        let mut memory = Memory::new(cfg.memory_capacity);
        let mut vecs = Vec::new();
        for s in &stream {
            let out = forward_sentence_step(&mut g, ctx, s, &mut memory, &mut rng).unwrap();
            vecs.push(g.value(out.sentence_vec).clone());
        }
        assert_eq!(memory.len(), 2);
        let held: Vec<Tensor<f64>> = memory.vars().iter().map(|&v| g.value(v).clone()).collect();
        assert_eq!(held[0], vecs[1], "oldest surviving entry is m2");
        assert_eq!(held[1], vecs[2], "newest entry is m3");
    }

    #[test]
    fn step_one_is_independent_of_pre_reset_content(){
        let cfg = tiny_cfg(Variant::Tg);
        let built: Built<f64> = Built::new(&cfg, 2);
        let s1 = sent(&cfg, &[BYTE_BASE, BYTE_BASE + 5], false);
        let s2 = sent(&cfg, &[BYTE_BASE + 6], true);
        // Logits of the first sentence after a reset do not depend on what
        // ran before the reset.
        let (solo, _) = run_stream_f64(&built, &[s2.clone()]);
        let (le, _) = run_stream_f64(&built, &[s1, s2.clone()]);
        let _ = le;
        let (again, _) = run_stream_f64(&built, &[s2]);
        assert_eq!(solo[0], again[0]);
    }

    #[test]
    fn cached_memory_kv_equals_per_layer_rebuild() {
        let cfg = tiny_cfg(Variant::Tg);
        let mut built: Built<f64> = Built::new(&cfg, 13);
        let stream = vec![
            sent(&cfg, &[BYTE_BASE, BYTE_BASE + 1, BYTE_BASE + 2], false),
            sent(&cfg, &[BYTE_BASE + 3], false),
            sent(&cfg, &[BYTE_BASE + 4, BYTE_BASE + 5], true),
        ];
        let (cached, _) = run_stream_f64(&built, &stream);
        built.opts.rebuild_memory_kv_per_layer = true;
        let (rebuilt, _) = run_stream_f64(&built, &stream);
        for (a, b) in cached.iter().zip(&rebuilt) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() <= 1e-12, "cached {} vs rebuilt {}", x, y);
            }
        }
    }

    #[test]
    fn zero_gates_equal_disabled_memory_reads() {
        let cfg = tiny_cfg(Variant::Tg);
        let mut built: Built<f64> = Built::new(&cfg, 17);
        for layer in &built.params.schema.layers.clone() {
            if let Some(gix) = layer.gate {
                built.params.values[gix] = Tensor::scalar(0.0);
            }
        }
        let stream = vec![
            sent(&cfg, &[BYTE_BASE, BYTE_BASE + 1], false),
            sent(&cfg, &[BYTE_BASE + 2, BYTE_BASE + 3], true),
        ];
        let (gated, _) = run_stream_f64(&built, &stream);
        built.opts.disable_memory_reads = true;
        let (twin, _) = run_stream_f64(&built, &stream);
        for (a, b) in gated.iter().zip(&twin) {
            assert_eq!(a, b, "zero-gate logits must equal the read-free twin exactly");
        }
    }

    #[test]
    fn perturbing_a_token_respects_causality() {
        let cfg = tiny_cfg(Variant::Tg);
        let built: Built<f64> = Built::new(&cfg, 4);
        let base = vec![
            sent(&cfg, &[BYTE_BASE, BYTE_BASE + 1, BYTE_BASE + 2, BYTE_BASE + 3], false),
            sent(&cfg, &[BYTE_BASE + 4, BYTE_BASE + 5], true),
        ];
        let mut edited = base.clone();
        edited[0].ids[3] = BYTE_BASE + 9; // third lexical token of sentence 1

        let (a, _) = run_stream_f64(&built, &base);
        let (b, _) = run_stream_f64(&built, &edited);

        // Rows before the edited position in sentence 1 are unchanged.
        for row in 0..3 {
            assert_eq!(a[0].row(row), b[0].row(row), "row {} leaked", row);
        }
        // The edited and later rows change.
        assert_ne!(a[0].row(3), b[0].row(3));
        // Sentence 2 sees the change through the memory and seeding.
        assert_ne!(a[1].row(0), b[1].row(0));

        // Editing sentence 2 leaves sentence 1 untouched.
        let mut edited2 = base.clone();
        edited2[1].ids[1] = BYTE_BASE + 9;
        let (c, _) = run_stream_f64(&built, &edited2);
        assert_eq!(a[0], c[0]);
    }

    #[test]
    fn detached_writes_kill_the_memory_gradient_chain() {
        for (variant, expect_zero) in [(Variant::Tg, false), (Variant::TgDetach, true)] {
            let mut cfg = tiny_cfg(variant);
            cfg.memory_capacity = 1;
            let params: Params<f64> = Params::init(&cfg, 8).unwrap();
            let stream = vec![
                sent(&cfg, &[BYTE_BASE, BYTE_BASE + 1], false),
                sent(&cfg, &[BYTE_BASE + 2], false),
                sent(&cfg, &[BYTE_BASE + 3, BYTE_BASE + 4], true),
            ];
            let mut g: Graph<f64> = Graph::new();
            let bound = params.bind(&mut g, true);
            let opts = ForwardOpts::eval();
            let ctx = Ctx {
                cfg: &cfg,
                schema: &params.schema,
                bound: &bound,
                opts: &opts,
            };
            let mut rng = Rng::seed_from_u64(0);
            let mut memory = Memory::new(cfg.memory_capacity);
            let mut last = None;
            for s in &stream {
                last = Some((
                    forward_sentence_step(&mut g, ctx, s, &mut memory, &mut rng).unwrap(),
                    s,
                ));
            }
            // Loss of sentence 3 alone.
            let (out, s3) = last.unwrap();
            let (targets, weights, _) = shifted_targets::<f64>(&s3.ids, 1.0);
            let rows = g.slice_rows(out.logits, 0, targets.len()).unwrap();
            let loss = g.weighted_cross_entropy(rows, &targets, &weights).unwrap();
            let mut grads = g.backward(loss).unwrap();
            let w_sent = params.schema.sent_head[0];
            let got = grads.take(bound.var(w_sent));
            let norm = got.map(|t| t.sq_norm()).unwrap_or(0.0);
            if expect_zero {
                assert_eq!(norm, 0.0, "detached write must zero the sentence-head grad");
            } else {
                assert!(norm > 0.0, "retained write must reach the sentence head");
            }
        }
    }

    #[test]
    fn stream_loss_matches_precomputed_weight_totals() {
        for variant in [Variant::Tg, Variant::Gpt2, Variant::Gpt2Boundary, Variant::Gpt2Gist] {
            let cfg = tiny_cfg(variant);
            let params: Params<f64> = Params::init(&cfg, 30).unwrap();
            let stream = vec![
                sent(&cfg, &[BYTE_BASE, BYTE_BASE + 1, BYTE_BASE + 2], false),
                sent(&cfg, &[BYTE_BASE + 3, BYTE_BASE + 4], true),
            ];
            let mut g: Graph<f64> = Graph::new();
            let bound = params.bind(&mut g, false);
            let opts = ForwardOpts::eval();
            let ctx = Ctx {
                cfg: &cfg,
                schema: &params.schema,
                bound: &bound,
                opts: &opts,
            };
            let mut rng = Rng::seed_from_u64(0);
            let out = stream_training_loss(&mut g, ctx, &stream, 0.05, &mut rng).unwrap();
            let expect = stream_weight_total(&cfg, &stream, 0.05);
            assert_close(out.weight_total, expect, 1e-9, "weight totals");
            assert!(g.value(out.loss).item().is_finite());
            assert!(out.lexical_tokens > 0);
        }
    }

    #[test]
    fn empty_stream_is_rejected() {
        let cfg = tiny_cfg(Variant::Tg);
        let params: Params<f64> = Params::init(&cfg, 1).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let bound = params.bind(&mut g, false);
        let opts = ForwardOpts::eval();
        let ctx = Ctx {
            cfg: &cfg,
            schema: &params.schema,
            bound: &bound,
            opts: &opts,
        };
        let mut rng = Rng::seed_from_u64(0);
        assert!(stream_training_loss(&mut g, ctx, &[], 1.0, &mut rng).is_err());
    }

    #[test]
    fn single_token_decoder_matches_independent_hand_trace() {
        let cfg = ModelConfig {
            vocab_size: 8,
            n_layers: 1,
            d_model: 2,
            n_heads: 1,
            ffn_mult: 1,
            lexical_cap: 4,
            context_window: 8,
            variant: Variant::Gpt2,
            ..ModelConfig::default()
        };
        let params: Params<f64> = Params::init(&cfg, 77).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let bound = params.bind(&mut g, false);
        let opts = ForwardOpts::eval();
        let ctx = Ctx {
            cfg: &cfg,
            schema: &params.schema,
            bound: &bound,
            opts: &opts,
        };
        let mut rng = Rng::seed_from_u64(0);
        let logits = forward_decoder(&mut g, ctx, &[5], &mut rng).unwrap();
        let got = g.value(logits);

        // Independent scalar trace of the same computation.
        let d = 2;
        let val = |ix: usize| params.value(ix).clone();
        let sch = &params.schema;
        let row = |t: &Tensor<f64>, i: usize| t.row(i).to_vec();
        let e5 = row(&val(sch.embed_tok), 5);
        let p0 = row(&val(sch.embed_pos), 0);
        let x: Vec<f64> = (0..d).map(|j| e5[j] + p0[j]).collect();

        let ln = |x: &[f64], gain: &[f64], bias: &[f64]| -> Vec<f64> {
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            (0..x.len())
                .map(|j| (x[j] - mean) * inv * gain[j] + bias[j])
                .collect()
        };
        let matvec = |x: &[f64], w: &Tensor<f64>, b: &[f64]| -> Vec<f64> {
            (0..w.cols())
                .map(|j| (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum::<f64>() + b[j])
                .collect()
        };
        let layer = &sch.layers[0];
        let n1 = ln(
            &x,
            &row(&val(layer.norm_attn.gain), 0),
            &row(&val(layer.norm_attn.bias), 0),
        );
        let attn = layer.self_attn.unwrap();
        // One position: softmax weight 1, ctx = v.
        let v = matvec(&n1, &val(attn.w_v), &row(&val(attn.b_v), 0));
        let o = matvec(&v, &val(attn.w_o), &row(&val(attn.b_o), 0));
        let h1: Vec<f64> = (0..d).map(|j| x[j] + o[j]).collect();
        let n2 = ln(
            &h1,
            &row(&val(layer.norm_ffn.gain), 0),
            &row(&val(layer.norm_ffn.bias), 0),
        );
        let f1 = matvec(&n2, &val(layer.ffn.w1), &row(&val(layer.ffn.b1), 0));
        let gelu = |x: f64| {
            0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
        };
        let f1: Vec<f64> = f1.into_iter().map(gelu).collect();
        let f2 = matvec(&f1, &val(layer.ffn.w2), &row(&val(layer.ffn.b2), 0));
        let h2: Vec<f64> = (0..d).map(|j| h1[j] + f2[j]).collect();
        let z = ln(
            &h2,
            &row(&val(sch.final_norm.gain), 0),
            &row(&val(sch.final_norm.bias), 0),
        );
        let e = val(sch.embed_tok);
        for vtok in 0..cfg.vocab_size {
            let expect: f64 = (0..d).map(|j| z[j] * e.get(vtok, j)).sum();
            assert_close(got.get(0, vtok), expect, 1e-9, "hand-trace logit");
        }
    }

    #[test]
    fn decoder_is_causal() {
        let cfg = ModelConfig {
            vocab_size: 16,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            ffn_mult: 2,
            lexical_cap: 4,
            context_window: 16,
            variant: Variant::Gpt2,
            ..ModelConfig::default()
        };
        let params: Params<f64> = Params::init(&cfg, 19).unwrap();
        let run = |ids: &[u32]| -> Tensor<f64> {
            let mut g: Graph<f64> = Graph::new();
            let bound = params.bind(&mut g, false);
            let opts = ForwardOpts::eval();
            let ctx = Ctx {
                cfg: &cfg,
                schema: &params.schema,
                bound: &bound,
                opts: &opts,
            };
            let mut rng = Rng::seed_from_u64(0);
            let l = forward_decoder(&mut g, ctx, ids, &mut rng).unwrap();
            g.value(l).clone()
        };
        let a = run(&[4, 5, 6, 7]);
        let b = run(&[4, 5, 6, 9]);
        for i in 0..3 {
            assert_eq!(a.row(i), b.row(i), "position {} saw the future", i);
        }
        assert_ne!(a.row(3), b.row(3));

        // Over-length windows are rejected.
        let mut g: Graph<f64> = Graph::new();
        let bound = params.bind(&mut g, false);
        let opts = ForwardOpts::eval();
        let ctx = Ctx {
            cfg: &cfg,
            schema: &params.schema,
            bound: &bound,
            opts: &opts,
        };
        let mut rng = Rng::seed_from_u64(0);
        let long = vec![4u32; 17];
        assert!(forward_decoder(&mut g, ctx, &long, &mut rng).is_err());
    }

    #[test]
    fn flatten_keeps_or_drops_boundaries() {
        let cfg = tiny_cfg(Variant::Tg);
        let stream = vec![
            sent(&cfg, &[BYTE_BASE, BYTE_BASE + 1], false),
            sent(&cfg, &[BYTE_BASE + 2], true),
        ];
        let plain = flatten_stream(&stream, false);
        assert_eq!(plain, vec![BYTE_BASE, BYTE_BASE + 1, BYTE_BASE + 2]);
        let boundary = flatten_stream(&stream, true);
        assert_eq!(
            boundary,
            vec![BOS, BYTE_BASE, BYTE_BASE + 1, EOS, BOS, BYTE_BASE + 2, EOD, EOS]
        );
        assert!(boundary.iter().all(|&id| id != PAD));
    }

    #[test]
    fn gist_mask_matches_brute_force_and_spec_cells() {
        // Two sentences of three tokens each.
        let sids = vec![0, 0, 0, 1, 1, 1];
        let eos = vec![false, false, true, false, false, true];
        let mask: Tensor<f64> = gist_mask(&sids, &eos);

        // Brute-force reconstruction, cell by cell.
        for i in 0..6 {
            for j in 0..6 {
                let open = (sids[j] == sids[i] && j <= i) || (eos[j] && sids[j] < sids[i]);
                let expect = if open { 0.0 } else { f64::mask_neg() };
                assert_eq!(mask.get(i, j), expect, "cell ({}, {})", i, j);
            }
        }
        // Token 4 may attend exactly {2 (earlier EOS), 3, 4}.
        let open_cols: Vec<usize> = (0..6).filter(|&j| mask.get(4, j) == 0.0).collect();
        assert_eq!(open_cols, vec![2, 3, 4]);
        // Never allows j > i.
        for i in 0..6 {
            for j in (i + 1)..6 {
                assert!(mask.get(i, j) != 0.0, "upper triangle open at ({}, {})", i, j);
            }
        }

        // One sentence reduces to the plain causal mask.
        let one: Tensor<f64> = gist_mask(&[0, 0, 0], &[false, false, true]);
        let causal: Tensor<f64> = causal_pad_mask(&[true, true, true], 0);
        assert_eq!(one, causal);
    }

    #[test]
    fn sentence_annotations_follow_bos_markers() {
        let ids = vec![BOS, 9, 9, EOS, BOS, 9, EOD, EOS];
        let (sids, eos) = sentence_annotations(&ids);
        assert_eq!(sids, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        let eos_pos: Vec<usize> = eos.iter().enumerate().filter(|(_, &e)| e).map(|(i, _)| i).collect();
        assert_eq!(eos_pos, vec![3, 7]);
    }

    #[test]
    fn respan_at_mean_sentence_length_matches_sentence_count() {
        // A document whose sentences are exactly 25 lexical tokens long:
        // respanning at 25 yields the same number of steps.
        let cap = 64;
        let sentences: Vec<SentenceTensor> = (0..6)
            .map(|i| {
                let ids: Vec<u32> = (0..25).map(|j| BYTE_BASE + ((i * 25 + j) % 100) as u32).collect();
                package_ids(&ids, cap, i == 5).unwrap()
            })
            .collect();
        let doc = crate::textpipe::PreparedDocument {
            doc_id: 0,
            sentences,
        };
        let respanned = crate::textpipe::respan_document(&doc, 25, cap).unwrap();
        assert_eq!(respanned.sentences.len(), doc.sentences.len());
    }
}
