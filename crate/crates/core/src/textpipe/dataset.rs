//! Prepared-data pipeline and its record-oriented binary format.
//!
//! One file per split. Header: magic "TGDS", version, vocab hash, the lexical
//! cap L and tensor length T; then per-stream records (doc id, sentence
//! count, token ids as u16, and per-sentence n_lex / is_final bytes), all
//! little-endian. The prep pipeline stores each document as a single stream;
//! slicing to the curriculum length happens at load time.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::sentence::SentenceTensor;
use super::split::{split_documents, split_sentences, Document};
use super::stream::PreparedDocument;
use super::vocab::Vocab;
use crate::autodiff::Rng;
use crate::error::{Error, Result};
use crate::exec::{self, Mode};
use crate::seeds;

const MAGIC: &[u8; 4] = b"TGDS";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub docs: Vec<PreparedDocument>,
    pub vocab_hash: u64,
    pub lexical_cap: usize,
    pub tensor_len: usize,
}

impl PreparedSplit {
    pub fn lexical_tokens(&self) -> usize {
        self.docs.iter().map(|d| d.lexical_tokens()).sum()
    }

    pub fn n_sentences(&self) -> usize {
        self.docs.iter().map(|d| d.sentences.len()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct PrepOptions {
    pub target_vocab: usize,
    pub lexical_cap: usize,
    /// Document fractions carved from the training corpus when no dedicated
    /// validation/test corpus is given.
    pub valid_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for PrepOptions {
    fn default() -> Self {
        PrepOptions {
            target_vocab: 8192,
            lexical_cap: 64,
            valid_frac: 0.05,
            test_frac: 0.05,
            seed: 0,
        }
    }
}

pub struct Prepared {
    pub vocab: Vocab,
    pub train: PreparedSplit,
    pub valid: PreparedSplit,
    pub test: PreparedSplit,
}

/// Convert raw corpora into tokenized documents plus a vocabulary learned on
/// the training split only. Documents are processed in parallel workers and
/// merged in corpus order, so the result does not depend on worker count.
pub fn prepare_corpus(
    train_text: &str,
    valid_text: Option<&str>,
    test_text: Option<&str>,
    opts: &PrepOptions,
    mode: Mode,
) -> Result<Prepared> {
    let mut train_docs = split_documents(train_text);
    if train_docs.is_empty() {
        return Err(Error::invalid("training corpus contains no documents"));
    }

    let (carved_valid, carved_test) = if valid_text.is_none() || test_text.is_none() {
        carve_heldout(&mut train_docs, opts)
    } else {
        (Vec::new(), Vec::new())
    };
    let valid_docs = match valid_text {
        Some(t) => split_documents(t),
        None => carved_valid,
    };
    let test_docs = match test_text {
        Some(t) => split_documents(t),
        None => carved_test,
    };

    let train_refs: Vec<&str> = train_docs.iter().map(|d| d.text.as_str()).collect();
    let vocab = Vocab::build(&train_refs, opts.target_vocab)?;
    if vocab.size() > u16::MAX as usize + 1 {
        return Err(Error::invalid("vocabulary too large for u16 token storage"));
    }
    let hash = vocab.content_hash();

    let tokenize_all = |docs: &[Document]| -> Result<Vec<PreparedDocument>> {
        let results = exec::map_indexed(mode, docs, |_, doc| {
            prepare_document(doc, &vocab, opts.lexical_cap)
        });
        let mut out = Vec::with_capacity(results.len());
        for r in results {
            if let Some(d) = r? {
                out.push(d);
            }
        }
        Ok(out)
    };

    let make_split = |docs: Vec<PreparedDocument>| PreparedSplit {
        docs,
        vocab_hash: hash,
        lexical_cap: opts.lexical_cap,
        tensor_len: opts.lexical_cap + 3,
    };

    let train = make_split(tokenize_all(&train_docs)?);
    let valid = make_split(tokenize_all(&valid_docs)?);
    let test = make_split(tokenize_all(&test_docs)?);
    if train.docs.is_empty() {
        return Err(Error::invalid("training corpus produced no sentences"));
    }
    Ok(Prepared {
        vocab,
        train,
        valid,
        test,
    })
}

/// Deterministically move document fractions out of the training list.
fn carve_heldout(train: &mut Vec<Document>, opts: &PrepOptions) -> (Vec<Document>, Vec<Document>) {
    use rand::seq::SliceRandom as _;
    use rand::SeedableRng as _;
    let n = train.len();
    let want = |frac: f64| -> usize {
        if frac <= 0.0 || n < 3 {
            0
        } else {
            ((n as f64 * frac).round() as usize).clamp(1, n / 3)
        }
    };
    let n_valid = want(opts.valid_frac);
    let n_test = want(opts.test_frac);
    if n_valid + n_test == 0 {
        return (Vec::new(), Vec::new());
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::seed_from_u64(seeds::derive(opts.seed, seeds::DATA));
    order.shuffle(&mut rng);
    let mut valid_ix: Vec<usize> = order[..n_valid].to_vec();
    let mut test_ix: Vec<usize> = order[n_valid..n_valid + n_test].to_vec();
    valid_ix.sort_unstable();
    test_ix.sort_unstable();
    let take = |ix: &[usize], docs: &[Document]| -> Vec<Document> {
        ix.iter().map(|&i| docs[i].clone()).collect()
    };
    let valid = take(&valid_ix, train);
    let test = take(&test_ix, train);
    let drop: std::collections::HashSet<usize> =
        valid_ix.iter().chain(test_ix.iter()).copied().collect();
    let mut keep = Vec::with_capacity(n - drop.len());
    for (i, d) in train.drain(..).enumerate() {
        if !drop.contains(&i) {
            keep.push(d);
        }
    }
    *train = keep;
    (valid, test)
}

/// Sentence-split and tokenize one document. Documents with no sentences
/// disappear from the pipeline.
pub fn prepare_document(
    doc: &Document,
    vocab: &Vocab,
    cap: usize,
) -> Result<Option<PreparedDocument>> {
    let sentences = split_sentences(&doc.text, vocab, cap)?;
    if sentences.is_empty() {
        return Ok(None);
    }
    let mut tensors = Vec::with_capacity(sentences.len());
    let mut enc = super::vocab::CachedEncoder::new(vocab);
    let last = sentences.len() - 1;
    for (i, s) in sentences.iter().enumerate() {
        let ids = enc.encode(s);
        tensors.push(super::sentence::package_ids(&ids, cap, i == last)?);
    }
    Ok(Some(PreparedDocument {
        doc_id: doc.doc_id,
        sentences: tensors,
    }))
}

// ---- binary io -----------------------------------------------------------

pub fn write_split(path: &Path, split: &PreparedSplit) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&split.vocab_hash.to_le_bytes())?;
    w.write_all(&(split.lexical_cap as u32).to_le_bytes())?;
    w.write_all(&(split.tensor_len as u32).to_le_bytes())?;
    for doc in &split.docs {
        let n = doc.sentences.len();
        if n > u16::MAX as usize {
            return Err(Error::invalid(format!(
                "document {} has {} sentences, beyond the u16 record limit",
                doc.doc_id, n
            )));
        }
        w.write_all(&doc.doc_id.to_le_bytes())?;
        w.write_all(&(n as u16).to_le_bytes())?;
        for s in &doc.sentences {
            if s.len() != split.tensor_len {
                return Err(Error::invalid("sentence tensor length mismatch in split"));
            }
            for &id in &s.ids {
                w.write_all(&(id as u16).to_le_bytes())?;
            }
        }
        for s in &doc.sentences {
            w.write_all(&[s.n_lex as u8, u8::from(s.is_final)])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_split(path: &Path) -> Result<PreparedSplit> {
    let display = path.display().to_string();
    let bad = |detail: &str| Error::Format {
        path: display.clone(),
        detail: detail.to_string(),
    };
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {}", version)));
    }
    let vocab_hash = read_u64(&mut r)?;
    let lexical_cap = read_u32(&mut r)? as usize;
    let tensor_len = read_u32(&mut r)? as usize;
    if tensor_len != lexical_cap + 3 {
        return Err(bad("tensor length does not match lexical cap"));
    }

    let mut docs = Vec::new();
    loop {
        let mut doc_id_buf = [0u8; 4];
        match r.read_exact(&mut doc_id_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let doc_id = u32::from_le_bytes(doc_id_buf);
        let n = read_u16(&mut r)? as usize;
        let mut all_ids = vec![0u16; n * tensor_len];
        let mut bytes = vec![0u8; n * tensor_len * 2];
        r.read_exact(&mut bytes)?;
        for (i, chunk) in bytes.chunks_exact(2).enumerate() {
            all_ids[i] = u16::from_le_bytes([chunk[0], chunk[1]]);
        }
        let mut meta = vec![0u8; n * 2];
        r.read_exact(&mut meta)?;
        let mut sentences = Vec::with_capacity(n);
        for i in 0..n {
            let ids: Vec<u32> = all_ids[i * tensor_len..(i + 1) * tensor_len]
                .iter()
                .map(|&v| v as u32)
                .collect();
            let n_lex = meta[i * 2] as usize;
            let is_final = meta[i * 2 + 1] != 0;
            if n_lex > lexical_cap {
                return Err(bad("n_lex exceeds lexical cap"));
            }
            sentences.push(SentenceTensor {
                ids,
                n_lex,
                is_final,
            });
        }
        docs.push(PreparedDocument { doc_id, sentences });
    }
    Ok(PreparedSplit {
        docs,
        vocab_hash,
        lexical_cap,
        tensor_len,
    })
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
