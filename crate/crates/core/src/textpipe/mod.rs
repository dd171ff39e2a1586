//! Corpus preparation: document and sentence splitting, byte-level subword
//! vocabulary, fixed-shape sentence tensors, sentence streams, and
//! token-budget batch plans.

mod batch;
mod dataset;
mod sentence;
mod split;
mod stream;
mod vocab;

pub use batch::{build_batches, BatchPlan, StreamSize};
pub use dataset::{prepare_corpus, read_split, write_split, PrepOptions, Prepared, PreparedSplit};
pub use sentence::{package_ids, tokenize_sentence, SentenceTensor, TokenKind};
pub use split::{split_documents, split_sentences, Document};
pub use stream::{respan_document, respan_ids, slice_streams, PreparedDocument, SentenceStream};
pub use vocab::{CachedEncoder, Vocab, BOS, BYTE_BASE, EOD, EOS, FIRST_MERGED, PAD};
