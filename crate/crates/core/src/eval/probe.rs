//! Father-son relation probe in completion mode.
//!
//! Each sample states a relation in a context sentence and queries it either
//! in the stated direction (normal: copy-paste prefix) or inverted
//! (reversed). The probe reads the model distribution at the first answer
//! position and records the NLL of the gold target and of the distractor
//! (the other name in the prompt), plus the reverse-direction margin
//! `NLL(distractor) - NLL(target)`.

use rand::Rng as _;
use rand::SeedableRng as _;

use crate::autodiff::{Graph, Rng, Scalar};
use crate::error::{Error, Result};
use crate::model::{forward_decoder, Ctx, ForwardOpts, Params};
use crate::seeds;
use crate::textpipe::{package_ids, Vocab, BOS, EOS};

pub const CONTEXT_TEMPLATE: &str = "The son of {A} is {B} .";
pub const NORMAL_QUERY_TEMPLATE: &str = "The son of {A} is";
pub const REVERSED_QUERY_TEMPLATE: &str = "The father of {B} is";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    Normal,
    Reversed,
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Condition::Normal => write!(f, "normal"),
            Condition::Reversed => write!(f, "reversed"),
        }
    }
}

/// One probe instance, pre-tokenized under the active vocabulary.
#[derive(Clone, Debug)]
pub struct ProbeSample {
    pub condition: Condition,
    pub context_lex: Vec<u32>,
    pub query_lex: Vec<u32>,
    pub target_id: u32,
    pub distractor_id: u32,
}

/// Anything that can produce a next-token distribution at the first answer
/// position of a probe sample.
pub trait AnswerScorer {
    fn vocab_size(&self) -> usize;
    fn answer_logits(&mut self, sample: &ProbeSample) -> Result<Vec<f64>>;
}

/// All-zero logits: the uniform distribution over the vocabulary.
pub struct UniformScorer {
    pub vocab: usize,
}

impl AnswerScorer for UniformScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn answer_logits(&mut self, _sample: &ProbeSample) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.vocab])
    }
}

/// Scripted order-bound shortcut: copies the context token at the offset
/// matching the query length, ignoring the relation entirely. Near-perfect in
/// the normal condition, systematically wrong in the reversed one.
pub struct CopyOracleScorer {
    pub vocab: usize,
    pub boost: f64,
}

impl AnswerScorer for CopyOracleScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn answer_logits(&mut self, sample: &ProbeSample) -> Result<Vec<f64>> {
        let mut logits = vec![0.0; self.vocab];
        if let Some(&copied) = sample.context_lex.get(sample.query_lex.len()) {
            logits[copied as usize] += self.boost;
        }
        Ok(logits)
    }
}

/// Memory-variant scorer: the context sentence is one sentence step (one
/// memory write), the query prefix is the next step; the distribution is read
/// at the last query token's row.
pub struct TgScorer<'p, S: Scalar> {
    pub params: &'p Params<S>,
}

impl<'p, S: Scalar> AnswerScorer for TgScorer<'p, S> {
    fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }

    fn answer_logits(&mut self, sample: &ProbeSample) -> Result<Vec<f64>> {
        let cfg = &self.params.config;
        if cfg.variant.is_decoder() {
            return Err(Error::invalid("TgScorer requires a memory variant"));
        }
        let cap = cfg.effective_cap();
        let context = package_ids(&sample.context_lex, cap, false)?;
        let query = package_ids(&sample.query_lex, cap, false)?;
        let mut stepper = super::perplexity::SentenceStepper::new(self.params);
        stepper.step(&context)?;
        let logits = stepper.step(&query)?;
        let answer_row = sample.query_lex.len();
        Ok(logits.row(answer_row).iter().map(|v| v.to_f64()).collect())
    }
}

/// Decoder-baseline scorer: context and query concatenated into one token
/// stream (with boundary markers for the boundary/gist variants), read at the
/// final position.
pub struct DecoderScorer<'p, S: Scalar> {
    pub params: &'p Params<S>,
}

impl<'p, S: Scalar> AnswerScorer for DecoderScorer<'p, S> {
    fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }

    fn answer_logits(&mut self, sample: &ProbeSample) -> Result<Vec<f64>> {
        let cfg = &self.params.config;
        if !cfg.variant.is_decoder() {
            return Err(Error::invalid("DecoderScorer requires a decoder variant"));
        }
        let mut ids = Vec::new();
        if cfg.variant.keeps_boundaries() {
            ids.push(BOS);
            ids.extend_from_slice(&sample.context_lex);
            ids.push(EOS);
            ids.push(BOS);
            ids.extend_from_slice(&sample.query_lex);
        } else {
            ids.extend_from_slice(&sample.context_lex);
            ids.extend_from_slice(&sample.query_lex);
        }
        let mut g: Graph<S> = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let opts = ForwardOpts::eval();
        let ctx = Ctx {
            cfg,
            schema: &self.params.schema,
            bound: &bound,
            opts: &opts,
        };
        let mut rng = Rng::seed_from_u64(0);
        let logits = forward_decoder(&mut g, ctx, &ids, &mut rng)?;
        Ok(g.value(logits)
            .row(ids.len() - 1)
            .iter()
            .map(|v| v.to_f64())
            .collect())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeResult {
    pub condition: Condition,
    pub n_samples: usize,
    /// Mean NLL of the gold answer token (nats).
    pub nll_target: f64,
    /// Mean NLL of the other name in the prompt.
    pub nll_distractor: f64,
    /// NLL(distractor) - NLL(target); positive prefers the right answer.
    pub margin: f64,
    pub top1_match_rate: f64,
}

fn log_softmax_nll(logits: &[f64], id: u32) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[id as usize]
}

fn fill_template(template: &str, a: &str, b: &str) -> String {
    template.replace("{A}", a).replace("{B}", b)
}

/// Names usable at the answer position: a single leading token under this
/// vocabulary (checked with the mid-sentence space prefix).
pub fn filter_single_token_names<'n>(vocab: &Vocab, names: &[&'n str]) -> Vec<&'n str> {
    names
        .iter()
        .copied()
        .filter(|n| vocab.encode(&format!(" {}", n)).len() == 1)
        .collect()
}

/// Run the probe in both conditions over `n` sampled name pairs.
pub fn run_probe(
    scorer: &mut dyn AnswerScorer,
    vocab: &Vocab,
    names: &[&str],
    n: usize,
    seed: u64,
) -> Result<[ProbeResult; 2]> {
    if n == 0 {
        return Err(Error::invalid("probe needs at least one sample"));
    }
    let usable = filter_single_token_names(vocab, names);
    if usable.len() < 2 {
        return Err(Error::invalid(format!(
            "name pool too small after single-token filtering: {} usable",
            usable.len()
        )));
    }
    let mut rng = Rng::seed_from_u64(seeds::derive(seed, seeds::PROBE));
    let mut acc = [(0.0f64, 0.0f64, 0usize); 2]; // target nll, distractor nll, top1 hits
    for _ in 0..n {
        let ai = rng.gen_range(0..usable.len());
        let mut bi = rng.gen_range(0..usable.len() - 1);
        if bi >= ai {
            bi += 1;
        }
        let (a, b) = (usable[ai], usable[bi]);
        let context_lex = vocab.encode(&fill_template(CONTEXT_TEMPLATE, a, b));
        let a_id = vocab.encode(&format!(" {}", a))[0];
        let b_id = vocab.encode(&format!(" {}", b))[0];
        for (slot, condition) in [Condition::Normal, Condition::Reversed].into_iter().enumerate() {
            let (query, target_id, distractor_id) = match condition {
                Condition::Normal => (fill_template(NORMAL_QUERY_TEMPLATE, a, b), b_id, a_id),
                Condition::Reversed => (fill_template(REVERSED_QUERY_TEMPLATE, a, b), a_id, b_id),
            };
            let sample = ProbeSample {
                condition,
                context_lex: context_lex.clone(),
                query_lex: vocab.encode(&query),
                target_id,
                distractor_id,
            };
            let logits = scorer.answer_logits(&sample)?;
            if logits.len() != scorer.vocab_size() {
                return Err(Error::invalid("scorer returned a wrong-sized distribution"));
            }
            acc[slot].0 += log_softmax_nll(&logits, target_id);
            acc[slot].1 += log_softmax_nll(&logits, distractor_id);
            let argmax = logits
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .map(|(i, _)| i as u32)
                .unwrap();
            if argmax == target_id {
                acc[slot].2 += 1;
            }
        }
    }
    let make = |slot: usize, condition: Condition| {
        let (t, d, hits) = acc[slot];
        let nll_target = t / n as f64;
        let nll_distractor = d / n as f64;
        ProbeResult {
            condition,
            n_samples: n,
            nll_target,
            nll_distractor,
            margin: nll_distractor - nll_target,
            top1_match_rate: hits as f64 / n as f64,
        }
    };
    Ok([make(0, Condition::Normal), make(1, Condition::Reversed)])
}

/// CSV emission, one row per condition.
pub fn probe_csv(results: &[ProbeResult]) -> String {
    let mut out =
        String::from("condition,n_samples,nll_target,nll_distractor,margin,top1_match_rate\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.condition, r.n_samples, r.nll_target, r.nll_distractor, r.margin, r.top1_match_rate
        ));
    }
    out
}
