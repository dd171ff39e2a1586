//! Uniform token-budget bucketing.
//!
//! Streams are grouped into sentence-count buckets, shuffled within each
//! bucket, and distributed longest-bucket-first into a pre-allocated set of
//! batches with a rotating first-fit scan. Rotation keeps deep streams spread
//! uniformly instead of clustering in the earliest batches; a least-loaded
//! fallback guarantees placement.

use std::collections::BTreeMap;

use rand::seq::SliceRandom as _;

use super::stream::SentenceStream;
use crate::autodiff::Rng;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamSize {
    pub sentences: usize,
    pub lexical: usize,
}

impl StreamSize {
    pub fn of(stream: &SentenceStream) -> StreamSize {
        StreamSize {
            sentences: stream.sentences.len(),
            lexical: stream.lexical_tokens(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchPlan {
    /// Stream indices per batch; every input stream appears exactly once.
    pub batches: Vec<Vec<usize>>,
    pub budget: usize,
    pub max_streams: usize,
    pub bucket_width: usize,
}

impl BatchPlan {
    pub fn n_batches(&self) -> usize {
        self.batches.len()
    }
}

pub fn build_batches(
    sizes: &[StreamSize],
    budget: usize,
    max_streams: usize,
    bucket_width: usize,
    rng: &mut Rng,
) -> Result<BatchPlan> {
    if budget == 0 || max_streams == 0 || bucket_width == 0 {
        return Err(Error::invalid(
            "budget, max_streams, and bucket_width must all be positive",
        ));
    }
    for (i, s) in sizes.iter().enumerate() {
        if s.lexical > budget {
            return Err(Error::invalid(format!(
                "stream {} has {} lexical tokens, more than the batch budget {}",
                i, s.lexical, budget
            )));
        }
    }
    let total: usize = sizes.iter().map(|s| s.lexical).sum();
    if sizes.is_empty() {
        return Ok(BatchPlan {
            batches: Vec::new(),
            budget,
            max_streams,
            bucket_width,
        });
    }
    let n_batches = total.div_ceil(budget).max(1);

    // Bucket by sentence count; BTreeMap reversed gives longest-first.
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in sizes.iter().enumerate() {
        buckets
            .entry(s.sentences.saturating_sub(1) / bucket_width)
            .or_default()
            .push(i);
    }

    let mut batches: Vec<Vec<usize>> = vec![Vec::new(); n_batches];
    let mut load = vec![0usize; n_batches];
    let mut cursor = 0usize;
    for (_depth, ids) in buckets.iter_mut().rev() {
        ids.shuffle(rng);
        for &sid in ids.iter() {
            let lex = sizes[sid].lexical;
            let mut placed = None;
            for off in 0..n_batches {
                let b = (cursor + off) % n_batches;
                if load[b] + lex <= budget && batches[b].len() < max_streams {
                    placed = Some(b);
                    break;
                }
            }
            let b = placed.unwrap_or_else(|| {
                // Least-loaded batch still under the stream cap; if every
                // batch is at the cap, least-loaded overall.
                let open = (0..n_batches)
                    .filter(|&b| batches[b].len() < max_streams)
                    .min_by_key(|&b| (load[b], b));
                open.unwrap_or_else(|| (0..n_batches).min_by_key(|&b| (load[b], b)).unwrap())
            });
            batches[b].push(sid);
            load[b] += lex;
            cursor = (b + 1) % n_batches;
        }
    }
    batches.retain(|b| !b.is_empty());
    Ok(BatchPlan {
        batches,
        budget,
        max_streams,
        bucket_width,
    })
}
