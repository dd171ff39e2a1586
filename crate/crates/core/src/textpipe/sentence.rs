//! Fixed-shape sentence tensors.
//!
//! Layout for a lexical cap of `L` (tensor length `T = 1 + L + 2`):
//! index 0 holds BOS, indices `1..=n_lex` the lexical ids, pads fill up to
//! index `L`, index `T-2` holds EOD for document-final sentences (else PAD),
//! and EOS is fixed at index `T-1`.

use super::vocab::{Vocab, BOS, BYTE_BASE, EOD, EOS, PAD};
use crate::error::{Error, Result};

/// What a token id is, for masking and loss weighting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Pad,
    Bos,
    Eos,
    Eod,
    Lexical,
}

impl TokenKind {
    pub fn of(id: u32) -> TokenKind {
        match id {
            PAD => TokenKind::Pad,
            BOS => TokenKind::Bos,
            EOS => TokenKind::Eos,
            EOD => TokenKind::Eod,
            _ => TokenKind::Lexical,
        }
    }

    pub fn is_lexical(self) -> bool {
        self == TokenKind::Lexical
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceTensor {
    pub ids: Vec<u32>,
    pub n_lex: usize,
    pub is_final: bool,
}

impl SentenceTensor {
    /// Tensor length `T`.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Lexical capacity `L` implied by the tensor length.
    pub fn lexical_cap(&self) -> usize {
        self.ids.len() - 3
    }

    pub fn lexical_ids(&self) -> &[u32] {
        &self.ids[1..=self.n_lex]
    }

    /// True at positions that participate in attention (non-pad).
    pub fn valid_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id != PAD).collect()
    }

    pub fn kinds(&self) -> Vec<TokenKind> {
        self.ids.iter().map(|&id| TokenKind::of(id)).collect()
    }
}

/// Wrap pre-tokenized lexical ids into the fixed layout.
pub fn package_ids(lex_ids: &[u32], cap: usize, is_final: bool) -> Result<SentenceTensor> {
    if lex_ids.is_empty() {
        return Err(Error::invalid("cannot package an empty sentence"));
    }
    if lex_ids.len() > cap {
        return Err(Error::invalid(format!(
            "sentence of {} tokens exceeds the cap {} (pipeline bug)",
            lex_ids.len(),
            cap
        )));
    }
    if lex_ids.iter().any(|&id| id < BYTE_BASE) {
        return Err(Error::invalid("reserved id inside lexical span"));
    }
    let t = cap + 3;
    let mut ids = vec![PAD; t];
    ids[0] = BOS;
    ids[1..=lex_ids.len()].copy_from_slice(lex_ids);
    ids[t - 2] = if is_final { EOD } else { PAD };
    ids[t - 1] = EOS;
    Ok(SentenceTensor {
        ids,
        n_lex: lex_ids.len(),
        is_final,
    })
}

/// Encode one sentence and lay it out as a fixed-length tensor.
pub fn tokenize_sentence(
    text: &str,
    vocab: &Vocab,
    cap: usize,
    is_final: bool,
) -> Result<SentenceTensor> {
    if text.trim().is_empty() {
        return Err(Error::invalid("cannot tokenize an empty sentence"));
    }
    package_ids(&vocab.encode(text), cap, is_final)
}
