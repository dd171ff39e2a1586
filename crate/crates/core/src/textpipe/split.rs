//! Document and sentence splitting.
//!
//! Documents open at top-level `= Title =` heading lines. Sentences split on
//! terminal punctuation followed by whitespace and a capital or digit, with a
//! fixed abbreviation guard; any sentence longer than the token cap is
//! re-split at the latest comma/semicolon/colon that fits, else hard-split at
//! the cap.

use regex::Regex;
use std::sync::OnceLock;

use super::vocab::Vocab;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub doc_id: u32,
    pub text: String,
}

fn top_heading_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^= [^=]+ =$").unwrap())
}

fn any_heading_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^=+ .* =+$").unwrap())
}

/// A new document starts at each line matching the top-level heading pattern
/// `= <title> =` (single `=` pair). Preamble before the first heading becomes
/// its own document when non-empty.
pub fn split_documents(corpus: &str) -> Vec<Document> {
    let mut docs: Vec<Document> = Vec::new();
    let mut current = String::new();
    let flush = |buf: &mut String, docs: &mut Vec<Document>| {
        if !buf.trim().is_empty() {
            docs.push(Document {
                doc_id: docs.len() as u32,
                text: std::mem::take(buf),
            });
        } else {
            buf.clear();
        }
    };
    for line in corpus.lines() {
        if top_heading_re().is_match(line.trim()) {
            flush(&mut current, &mut docs);
        }
        current.push_str(line);
        current.push('\n');
    }
    flush(&mut current, &mut docs);
    docs
}

const ABBREVIATIONS: [&str; 19] = [
    "Mr.", "Mrs.", "Ms.", "Dr.", "Prof.", "St.", "No.", "vs.", "etc.", "e.g.", "i.e.", "cf.",
    "Jr.", "Sr.", "Inc.", "Ltd.", "Co.", "Fig.", "al.",
];

/// Split a document into sentences, each at most `l_max` tokens under the
/// given vocabulary.
pub fn split_sentences(doc: &str, vocab: &Vocab, l_max: usize) -> Result<Vec<String>> {
    if l_max < 8 {
        return Err(Error::invalid(format!("sentence token cap {} below minimum 8", l_max)));
    }
    let mut out = Vec::new();
    for line in doc.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if any_heading_re().is_match(line) {
            cap_into(line, vocab, l_max, &mut out);
            continue;
        }
        for raw in split_terminal(line) {
            cap_into(raw, vocab, l_max, &mut out);
        }
    }
    Ok(out)
}

/// Primary split on `.` `!` `?` followed by whitespace and an uppercase
/// letter or digit, guarded against a fixed abbreviation list.
fn split_terminal(line: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = line.char_indices().collect();
    let mut pieces = Vec::new();
    let mut start = 0usize;
    for (ci, &(bi, c)) in chars.iter().enumerate() {
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        // Skip closing quotes/brackets after the terminal mark.
        let mut j = ci + 1;
        while j < chars.len() && matches!(chars[j].1, '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}') {
            j += 1;
        }
        if j >= chars.len() {
            break; // end of line closes the sentence anyway
        }
        if !chars[j].1.is_whitespace() {
            continue;
        }
        let mut k = j;
        while k < chars.len() && chars[k].1.is_whitespace() {
            k += 1;
        }
        if k >= chars.len() {
            break;
        }
        let next = chars[k].1;
        if !(next.is_uppercase() || next.is_ascii_digit()) {
            continue;
        }
        if c == '.' && is_guarded_abbreviation(line, bi) {
            continue;
        }
        let end = chars[j].0; // byte index just after punctuation + closers
        let piece = line[start..end].trim();
        if !piece.is_empty() {
            pieces.push(piece);
        }
        start = chars[k].0;
    }
    let tail = line[start..].trim();
    if !tail.is_empty() {
        pieces.push(tail);
    }
    pieces
}

/// The word ending at the period (inclusive) is on the guard list.
fn is_guarded_abbreviation(line: &str, dot_byte: usize) -> bool {
    let upto = &line[..dot_byte + 1];
    let word = upto.rsplit(char::is_whitespace).next().unwrap_or(upto);
    ABBREVIATIONS.contains(&word)
}

/// Enforce the token cap: prefer the latest `,` `;` `:` whose left side fits,
/// otherwise hard-split at exactly `l_max` tokens. Hard-split pieces keep
/// their bytes verbatim so the token arithmetic stays exact.
fn cap_into(sentence: &str, vocab: &Vocab, l_max: usize, out: &mut Vec<String>) {
    if sentence.trim().is_empty() {
        return;
    }
    let ids = vocab.encode(sentence);
    if ids.len() <= l_max {
        out.push(sentence.to_string());
        return;
    }

    // Candidate break points: byte offset just past the punctuation.
    let mut candidates: Vec<usize> = sentence
        .char_indices()
        .filter(|(_, c)| matches!(c, ',' | ';' | ':'))
        .map(|(i, c)| i + c.len_utf8())
        .collect();
    candidates.retain(|&i| i < sentence.len());
    for &cut in candidates.iter().rev() {
        let left = sentence[..cut].trim();
        let right = sentence[cut..].trim();
        if left.is_empty() || right.is_empty() {
            continue;
        }
        if vocab.encode(left).len() <= l_max {
            out.push(left.to_string());
            cap_into(right, vocab, l_max, out);
            return;
        }
    }

    // Hard split on the token sequence; shrink the cut until the decoded
    // prefix re-encodes within the cap.
    let mut cut = l_max.min(ids.len() - 1);
    loop {
        let left_text = vocab
            .decode_bytes(&ids[..cut])
            .map(|b| String::from_utf8_lossy(&b).into_owned())
            .unwrap_or_default();
        if !left_text.trim().is_empty() && vocab.encode(&left_text).len() <= l_max {
            out.push(left_text);
            break;
        }
        cut -= 1;
        if cut == 0 {
            // A single token always fits; this is unreachable for cap >= 8.
            out.push(sentence.to_string());
            return;
        }
    }
    let rest = vocab
        .decode_bytes(&ids[cut..])
        .map(|b| String::from_utf8_lossy(&b).into_owned())
        .unwrap_or_default();
    cap_into(&rest, vocab, l_max, out);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_vocab() -> Vocab {
        // 260 = bytes only, no merges: token counts equal byte counts per chunk.
        Vocab::from_merges(Vec::new())
    }

    #[test]
    fn two_headings_make_two_documents() {
        let corpus = "= First =\nbody one\n= Second =\nbody two\n";
        let docs = split_documents(corpus);
        assert_eq!(docs.len(), 2);
        assert!(docs[0].text.contains("body one"));
        assert!(docs[1].text.contains("body two"));
        assert_eq!(docs[0].doc_id, 0);
        assert_eq!(docs[1].doc_id, 1);
    }

    #[test]
    fn nested_headings_stay_inside_documents() {
        // Regex oracle on a five-line fixture: only the single-pair heading splits.
        let fixture = "= Top =\nintro text\n== Section ==\nmore text\n= = Deep = =";
        let re = Regex::new(r"^= [^=]+ =$").unwrap();
        let expected_splits: Vec<bool> = fixture.lines().map(|l| re.is_match(l.trim())).collect();
        assert_eq!(expected_splits, vec![true, false, false, false, false]);
        let docs = split_documents(fixture);
        assert_eq!(docs.len(), 1);
        assert!(docs[0].text.contains("== Section =="));
    }

    #[test]
    fn heading_free_text_is_one_document() {
        let docs = split_documents("just some text\nwith two lines\n");
        assert_eq!(docs.len(), 1);
    }

    #[test]
    fn empty_corpus_yields_no_documents() {
        assert!(split_documents("").is_empty());
        assert!(split_documents("   \n  \n").is_empty());
    }

    #[test]
    fn preamble_before_first_heading_is_its_own_document() {
        let docs = split_documents("preamble text\n= Title =\nbody\n");
        assert_eq!(docs.len(), 2);
        assert!(docs[0].text.contains("preamble"));
    }

    #[test]
    fn terminal_punctuation_splits_simple_sentences() {
        let vocab = raw_vocab();
        let got = split_sentences("A. B.", &vocab, 64).unwrap();
        assert_eq!(got, vec!["A.".to_string(), "B.".to_string()]);
    }

    #[test]
    fn abbreviations_do_not_split() {
        let vocab = raw_vocab();
        let got = split_sentences("Dr. Smith arrived. He sat down.", &vocab, 64).unwrap();
        assert_eq!(
            got,
            vec!["Dr. Smith arrived.".to_string(), "He sat down.".to_string()]
        );
    }

    #[test]
    fn lowercase_continuation_does_not_split() {
        let vocab = raw_vocab();
        let got = split_sentences("He said approx. one thing.", &vocab, 64).unwrap();
        assert_eq!(got.len(), 1);
    }

    #[test]
    fn comma_fallback_splits_overlong_sentences() {
        let vocab = raw_vocab();
        // 25 single-letter words (50 tokens), comma after word 10, cap 32.
        let left: Vec<String> = (0..10).map(|_| "a".to_string()).collect();
        let right: Vec<String> = (0..15).map(|_| "b".to_string()).collect();
        let sentence = format!("{}, {}", left.join(" "), right.join(" "));
        let total = vocab.encode(&sentence).len();
        assert!(total > 32, "fixture must exceed the cap, got {}", total);
        let got = split_sentences(&sentence, &vocab, 32).unwrap();
        assert_eq!(got.len(), 2);
        for part in &got {
            assert!(vocab.encode(part).len() <= 32);
        }
        assert!(got[0].ends_with(','));
    }

    #[test]
    fn hard_split_produces_exact_token_arithmetic() {
        let vocab = raw_vocab();
        // First word 2 bytes, then 64 words of 1 byte each: every chunk is
        // 2 tokens, 130 tokens total, no merge ambiguity.
        let mut words = vec!["qq".to_string()];
        words.extend((0..64).map(|_| "q".to_string()));
        let sentence = words.join(" ");
        assert_eq!(vocab.encode(&sentence).len(), 130);
        let got = split_sentences(&sentence, &vocab, 64).unwrap();
        let lens: Vec<usize> = got.iter().map(|s| vocab.encode(s).len()).collect();
        assert_eq!(lens, vec![64, 64, 2]);
    }

    #[test]
    fn tiny_cap_is_rejected() {
        let vocab = raw_vocab();
        assert!(split_sentences("text", &vocab, 7).is_err());
    }
}
