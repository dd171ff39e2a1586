//! Sentence streams: contiguous runs of sentences processed under one memory
//! lifetime, plus the fixed token-span repackaging used by the span-recurrence
//! variants.

use super::sentence::{package_ids, SentenceTensor};
use crate::error::{Error, Result};

/// A document after tokenization: ordered sentence tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDocument {
    pub doc_id: u32,
    pub sentences: Vec<SentenceTensor>,
}

impl PreparedDocument {
    pub fn lexical_tokens(&self) -> usize {
        self.sentences.iter().map(|s| s.n_lex).sum()
    }
}

/// Contiguous slice of a document's sentences; the model's memory is reset
/// at every stream start.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceStream {
    pub doc_id: u32,
    pub sentences: Vec<SentenceTensor>,
}

impl SentenceStream {
    pub fn lexical_tokens(&self) -> usize {
        self.sentences.iter().map(|s| s.n_lex).sum()
    }
}

/// Greedy contiguous chunks of at most `s` sentences, order preserved.
pub fn slice_streams(doc: &PreparedDocument, s: usize) -> Result<Vec<SentenceStream>> {
    if s == 0 {
        return Err(Error::invalid("stream length S must be at least 1"));
    }
    Ok(doc
        .sentences
        .chunks(s)
        .map(|chunk| SentenceStream {
            doc_id: doc.doc_id,
            sentences: chunk.to_vec(),
        })
        .collect())
}

/// Cut a document's lexical token sequence into consecutive spans of
/// `n_span` tokens (last may be shorter), each packaged as one sentence step.
/// The document-final span carries the EOD marker.
pub fn respan_ids(lexical: &[u32], n_span: usize, cap: usize) -> Result<Vec<SentenceTensor>> {
    if n_span == 0 {
        return Err(Error::invalid("span length must be at least 1"));
    }
    if n_span > cap {
        return Err(Error::invalid(format!(
            "span length {} exceeds the tensor lexical cap {}",
            n_span, cap
        )));
    }
    let n_chunks = lexical.len().div_ceil(n_span);
    let mut out = Vec::with_capacity(n_chunks);
    for (i, chunk) in lexical.chunks(n_span).enumerate() {
        out.push(package_ids(chunk, cap, i + 1 == n_chunks)?);
    }
    Ok(out)
}

/// Repackage a sentence-split document into fixed token spans.
pub fn respan_document(doc: &PreparedDocument, n_span: usize, cap: usize) -> Result<PreparedDocument> {
    let lexical: Vec<u32> = doc
        .sentences
        .iter()
        .flat_map(|s| s.lexical_ids().iter().copied())
        .collect();
    Ok(PreparedDocument {
        doc_id: doc.doc_id,
        sentences: respan_ids(&lexical, n_span, cap)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textpipe::vocab::BYTE_BASE;

    fn doc_with(n: usize) -> PreparedDocument {
        let sentences = (0..n)
            .map(|i| {
                let id = BYTE_BASE + (i % 200) as u32;
                package_ids(&[id, id, id], 8, i + 1 == n).unwrap()
            })
            .collect();
        PreparedDocument {
            doc_id: 7,
            sentences,
        }
    }

    #[test]
    fn seven_sentences_at_three_chunk_as_3_3_1() {
        let doc = doc_with(7);
        let streams = slice_streams(&doc, 3).unwrap();
        let lens: Vec<usize> = streams.iter().map(|s| s.sentences.len()).collect();
        assert_eq!(lens, vec![3, 3, 1]);
        assert!(streams.iter().all(|s| s.doc_id == 7));
    }

    #[test]
    fn large_s_gives_a_single_stream() {
        let doc = doc_with(5);
        let streams = slice_streams(&doc, 100).unwrap();
        assert_eq!(streams.len(), 1);
        assert_eq!(streams[0].sentences.len(), 5);
    }

    #[test]
    fn reslicing_preserves_sentence_count() {
        let doc = doc_with(101);
        for s in [30, 42] {
            let streams = slice_streams(&doc, s).unwrap();
            let total: usize = streams.iter().map(|st| st.sentences.len()).sum();
            assert_eq!(total, 101);
            assert!(streams.iter().all(|st| st.sentences.len() <= s));
        }
    }

    #[test]
    fn zero_s_is_rejected() {
        assert!(slice_streams(&doc_with(3), 0).is_err());
    }

    #[test]
    fn respan_cuts_60_tokens_at_25_into_25_25_10() {
        let lexical: Vec<u32> = (0..60).map(|i| BYTE_BASE + (i % 11) as u32).collect();
        let spans = respan_ids(&lexical, 25, 25).unwrap();
        let lens: Vec<usize> = spans.iter().map(|s| s.n_lex).collect();
        assert_eq!(lens, vec![25, 25, 10]);
        assert!(spans[2].is_final);
        assert!(!spans[0].is_final && !spans[1].is_final);

        // Concatenated spans reproduce the original token sequence.
        let back: Vec<u32> = spans
            .iter()
            .flat_map(|s| s.lexical_ids().iter().copied())
            .collect();
        assert_eq!(back, lexical);
    }
}
