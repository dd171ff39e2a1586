//! Byte-level subword vocabulary learned by greedy pair merging.
//!
//! Ids 0..4 are reserved control tokens, 4..260 are the raw byte alphabet,
//! and 260.. are learned merges. Subword encoding of text can only produce
//! byte and merge ids, so round trips are lossless for arbitrary input.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const EOD: u32 = 3;
/// First byte token; byte `b` has id `BYTE_BASE + b`.
pub const BYTE_BASE: u32 = 4;
/// First learned merge id.
pub const FIRST_MERGED: u32 = 260;

const RESERVED: [(&str, u32); 4] = [("PAD", PAD), ("BOS", BOS), ("EOS", EOS), ("EOD", EOD)];

#[derive(Clone, Debug)]
pub struct Vocab {
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    token_bytes: Vec<Vec<u8>>, // indexed by id; reserved ids map to empty
}

impl Vocab {
    /// Learn `target_size - 260` merges by repeatedly fusing the most
    /// frequent adjacent pair (ties broken toward the smaller pair).
    /// Stops early when no pair repeats. Deterministic for fixed input.
    pub fn build(texts: &[&str], target_size: usize) -> Result<Vocab> {
        if target_size < FIRST_MERGED as usize {
            return Err(Error::invalid(format!(
                "vocab size {} cannot cover the byte alphabet plus reserved ids ({})",
                target_size, FIRST_MERGED
            )));
        }
        if texts.iter().all(|t| t.is_empty()) {
            return Err(Error::invalid("cannot build a vocabulary from empty text"));
        }

        // Chunk frequencies, ordered by chunk bytes for determinism.
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for text in texts {
            for chunk in chunks(text) {
                *counts.entry(chunk).or_insert(0) += 1;
            }
        }
        let mut words: Vec<(Vec<u32>, u64)> = counts
            .into_iter()
            .map(|(w, c)| (w.bytes().map(|b| BYTE_BASE + b as u32).collect(), c))
            .collect();
        words.sort_by(|a, b| a.0.cmp(&b.0));

        // Pair statistics plus an occurrence index for incremental updates.
        let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
        let mut pair_words: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
        for (wi, (syms, c)) in words.iter().enumerate() {
            for p in adjacent_pairs(syms) {
                *pair_counts.entry(p).or_insert(0) += *c as i64;
                pair_words.entry(p).or_default().push(wi);
            }
        }

        let n_merges = target_size - FIRST_MERGED as usize;
        let mut merges = Vec::with_capacity(n_merges);
        while merges.len() < n_merges {
            let mut best: Option<((u32, u32), i64)> = None;
            for (&p, &c) in &pair_counts {
                if c <= 0 {
                    continue;
                }
                match best {
                    None => best = Some((p, c)),
                    Some((bp, bc)) => {
                        if c > bc || (c == bc && p < bp) {
                            best = Some((p, c));
                        }
                    }
                }
            }
            let (pair, count) = match best {
                Some(b) if b.1 >= 2 => b,
                _ => break,
            };
            let _ = count;
            let new_id = FIRST_MERGED + merges.len() as u32;
            merges.push(pair);

            let affected = pair_words.remove(&pair).unwrap_or_default();
            pair_counts.remove(&pair);
            for wi in dedup_sorted(affected) {
                let (syms, c) = &words[wi];
                let c = *c;
                if !contains_pair(syms, pair) {
                    continue;
                }
                for p in adjacent_pairs(syms) {
                    if let Some(e) = pair_counts.get_mut(&p) {
                        *e -= c as i64;
                    }
                }
                let merged = merge_word(syms, pair, new_id);
                for p in adjacent_pairs(&merged) {
                    *pair_counts.entry(p).or_insert(0) += c as i64;
                    pair_words.entry(p).or_default().push(wi);
                }
                words[wi].0 = merged;
            }
        }

        Ok(Vocab::from_merges(merges))
    }

    pub fn from_merges(merges: Vec<(u32, u32)>) -> Vocab {
        let mut token_bytes: Vec<Vec<u8>> = Vec::with_capacity(FIRST_MERGED as usize + merges.len());
        for _ in 0..BYTE_BASE {
            token_bytes.push(Vec::new());
        }
        for b in 0..=255u8 {
            token_bytes.push(vec![b]);
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, &(l, r)) in merges.iter().enumerate() {
            let mut bytes = token_bytes[l as usize].clone();
            bytes.extend_from_slice(&token_bytes[r as usize]);
            token_bytes.push(bytes);
            ranks.insert((l, r), i as u32);
        }
        Vocab {
            merges,
            ranks,
            token_bytes,
        }
    }

    pub fn size(&self) -> usize {
        FIRST_MERGED as usize + self.merges.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn is_lexical(id: u32) -> bool {
        id >= BYTE_BASE
    }

    /// Encode text to subword ids; never produces reserved ids.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in chunks(text) {
            self.encode_chunk_into(chunk, &mut out);
        }
        out
    }

    fn encode_chunk_into(&self, chunk: &str, out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = chunk.bytes().map(|b| BYTE_BASE + b as u32).collect();
        loop {
            let mut best: Option<(u32, (u32, u32))> = None;
            for p in adjacent_pairs(&syms) {
                if let Some(&rank) = self.ranks.get(&p) {
                    if best.map_or(true, |(r, _)| rank < r) {
                        best = Some((rank, p));
                    }
                }
            }
            match best {
                None => break,
                Some((rank, pair)) => {
                    syms = merge_word(&syms, pair, FIRST_MERGED + rank);
                }
            }
        }
        out.extend_from_slice(&syms);
    }

    /// Exact decode; rejects reserved ids and ids beyond the vocabulary.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        String::from_utf8(bytes)
            .map_err(|_| Error::invalid("decoded bytes are not valid UTF-8 at these boundaries"))
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            if id < BYTE_BASE {
                return Err(Error::invalid(format!("cannot decode reserved id {}", id)));
            }
            let bytes = self
                .token_bytes
                .get(id as usize)
                .ok_or_else(|| Error::invalid(format!("id {} outside vocabulary", id)))?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    /// Canonical text form: reserved declarations then one merge per line.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        for (name, id) in RESERVED {
            let _ = writeln!(s, "reserved {} {}", name, id);
        }
        for &(l, r) in &self.merges {
            let _ = writeln!(s, "{} {}", l, r);
        }
        s
    }

    pub fn parse(text: &str, path: &str) -> Result<Vocab> {
        let mut merges = Vec::new();
        let mut reserved_seen = 0usize;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("reserved ") {
                let mut it = rest.split_whitespace();
                let name = it.next().unwrap_or("");
                let id: u32 = it
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad_line(path, ln, "malformed reserved declaration"))?;
                let expect = RESERVED
                    .iter()
                    .find(|(n, _)| *n == name)
                    .ok_or_else(|| bad_line(path, ln, "unknown reserved token"))?;
                if expect.1 != id {
                    return Err(bad_line(path, ln, "reserved id mismatch"));
                }
                reserved_seen += 1;
                continue;
            }
            let mut it = line.split_whitespace();
            let l: u32 = it
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad_line(path, ln, "malformed merge"))?;
            let r: u32 = it
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad_line(path, ln, "malformed merge"))?;
            let next_id = FIRST_MERGED + merges.len() as u32;
            if l < BYTE_BASE || r < BYTE_BASE || l >= next_id || r >= next_id {
                return Err(bad_line(path, ln, "merge references an undefined id"));
            }
            merges.push((l, r));
        }
        if reserved_seen != RESERVED.len() {
            return Err(Error::Format {
                path: path.to_string(),
                detail: "missing reserved-token declarations".into(),
            });
        }
        Ok(Vocab::from_merges(merges))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.serialize())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path)?;
        Vocab::parse(&text, &path.display().to_string())
    }

    /// First 8 bytes (LE) of the SHA-256 of the canonical serialization.
    pub fn content_hash(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.serialize().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

fn bad_line(path: &str, ln: usize, detail: &str) -> Error {
    Error::Format {
        path: path.to_string(),
        detail: format!("line {}: {}", ln + 1, detail),
    }
}

/// Encoder with a per-worker chunk cache for bulk tokenization.
pub struct CachedEncoder<'v> {
    vocab: &'v Vocab,
    cache: HashMap<String, Vec<u32>>,
}

impl<'v> CachedEncoder<'v> {
    pub fn new(vocab: &'v Vocab) -> Self {
        CachedEncoder {
            vocab,
            cache: HashMap::new(),
        }
    }

    pub fn encode(&mut self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in chunks(text) {
            if let Some(ids) = self.cache.get(chunk) {
                out.extend_from_slice(ids);
            } else {
                let mut ids = Vec::new();
                self.vocab.encode_chunk_into(chunk, &mut ids);
                out.extend_from_slice(&ids);
                self.cache.insert(chunk.to_string(), ids);
            }
        }
        out
    }
}

/// Split text into merge-local chunks: each chunk is an optional whitespace
/// run followed by a non-whitespace run (or a trailing whitespace run).
/// Concatenating chunks reproduces the input exactly.
fn chunks(text: &str) -> impl Iterator<Item = &str> {
    let bytes = text.as_bytes();
    let mut start = 0;
    let mut iter_done = text.is_empty();
    std::iter::from_fn(move || {
        if iter_done {
            return None;
        }
        let mut i = start;
        // Leading whitespace run.
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        // Non-whitespace run; stop before the next ASCII whitespace.
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let chunk = &text[start..i];
        start = i;
        if start >= bytes.len() {
            iter_done = true;
        }
        Some(chunk)
    })
}

fn adjacent_pairs(syms: &[u32]) -> impl Iterator<Item = (u32, u32)> + '_ {
    syms.windows(2).map(|w| (w[0], w[1]))
}

fn contains_pair(syms: &[u32], pair: (u32, u32)) -> bool {
    syms.windows(2).any(|w| (w[0], w[1]) == pair)
}

/// Replace non-overlapping occurrences of `pair`, scanning left to right.
fn merge_word(syms: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    out
}

fn dedup_sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}
