//! Word-level text tokenizer.
//!
//! Text is lowercased and split into maximal runs of alphanumeric
//! characters; whitespace and punctuation only separate tokens. The vocabulary
//! keeps the most frequent types, breaking frequency ties lexicographically.
//!
//! # Vocabulary file
//!
//! ```text
//! #emofuse-vocab 1
//! <pad>
//! <cls>
//! <sep>
//! <mask>
//! <unk>
//! #end-specials
//! first-token        <- id 5
//! second-token       <- id 6
//! ```

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::persist::write_atomic;
use crate::tokens::{is_special, Modality, TokenSequence, N_SPECIALS, SPECIAL_NAMES, UNK};

const VOCAB_HEADER: &str = "#emofuse-vocab 1";
const VOCAB_END_SPECIALS: &str = "#end-specials";

/// Text to token IDs and back. [`Vocabulary`] is the word-level implementation.
pub trait TextTokenizer {
    fn encode(&self, text: &str, max_len: usize) -> TokenSequence;
    fn decode(&self, ids: &[u32]) -> Result<String>;
    fn vocab_size(&self) -> usize;
}

/// Splits text into normalized word tokens.
pub fn normalize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_body(body: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        tokens.extend(body);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(VOCAB_HEADER);
        out.push('\n');
        for t in &self.tokens[..N_SPECIALS as usize] {
            out.push_str(t);
            out.push('\n');
        }
        out.push_str(VOCAB_END_SPECIALS);
        out.push('\n');
        for t in &self.tokens[N_SPECIALS as usize..] {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Parse {
            path: origin.display().to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, VOCAB_HEADER)) => {}
            _ => return Err(bad(1, format!("expected {VOCAB_HEADER:?}"))),
        }
        for expected in SPECIAL_NAMES {
            match lines.next() {
                Some((_, l)) if l == expected => {}
                Some((i, l)) => return Err(bad(i + 1, format!("expected {expected}, got {l:?}"))),
                None => return Err(bad(0, "truncated specials block".into())),
            }
        }
        match lines.next() {
            Some((_, VOCAB_END_SPECIALS)) => {}
            Some((i, _)) => return Err(bad(i + 1, format!("expected {VOCAB_END_SPECIALS:?}"))),
            None => return Err(bad(0, "truncated specials block".into())),
        }
        let mut body = Vec::new();
        for (i, l) in lines {
            if l.is_empty() || normalize(l) != [l] {
                return Err(bad(i + 1, format!("invalid token {l:?}")));
            }
            body.push(l.to_string());
        }
        Self::from_body(body).map_err(|e| bad(0, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

/// Builds a vocabulary of at most `max_size` entries (specials included).
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
    }
    if max_size < N_SPECIALS as usize {
        return Err(Error::Config(format!(
            "vocabulary size {max_size} cannot hold the {N_SPECIALS} special tokens"
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for line in corpus {
        for w in normalize(line.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - N_SPECIALS as usize);
    Vocabulary::from_body(ranked.into_iter().map(|(w, _)| w).collect())
}

/// Encodes `text` as CLS followed by at most `max_len - 1` word IDs.
pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let body = normalize(text)
        .into_iter()
        .take(max_len.saturating_sub(1))
        .map(|w| vocab.id(&w).unwrap_or(UNK));
    TokenSequence::with_cls(Modality::Text, body)
}

/// Space-joins the token strings, skipping specials.
pub fn decode(ids: &[u32], vocab: &Vocabulary) -> Result<String> {
    let mut words = Vec::with_capacity(ids.len());
    for &id in ids {
        let tok = vocab
            .token(id)
            .ok_or_else(|| Error::Input(format!("token id {id} not in vocabulary")))?;
        if !is_special(id) {
            words.push(tok);
        }
    }
    Ok(words.join(" "))
}

impl TextTokenizer for Vocabulary {
    fn encode(&self, text: &str, max_len: usize) -> TokenSequence {
        encode(text, self, max_len)
    }

    fn decode(&self, ids: &[u32]) -> Result<String> {
        decode(ids, self)
    }

    fn vocab_size(&self) -> usize {
        self.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::CLS;

    #[test]
    fn frequency_orders_ids() {
        let v = build_vocab(&["a b", "a"], 8).unwrap();
        assert!(v.id("a").unwrap() < v.id("b").unwrap());
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = build_vocab(&["zeta alpha"], 10).unwrap();
        assert!(v.id("alpha").unwrap() < v.id("zeta").unwrap());
    }

    #[test]
    fn corpus_closure_never_yields_unk() {
        let corpus = ["one two", "three one"];
        let v = build_vocab(&corpus, 100).unwrap();
        for line in corpus {
            assert!(!encode(line, &v, 512).ids().contains(&UNK));
        }
    }

    #[test]
    fn max_size_truncates_rare_words() {
        let v = build_vocab(&["a a a b b c"], N_SPECIALS as usize + 2).unwrap();
        assert_eq!(v.id("c"), None);
        assert_eq!(encode("c", &v, 8).body(), &[UNK]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let empty: [&str; 0] = [];
        assert!(matches!(build_vocab(&empty, 10), Err(Error::Input(_))));
    }

    #[test]
    fn encode_decode() {
        let v = build_vocab(&["hello world", "Hello, there!"], 50).unwrap();
        assert_eq!(encode("", &v, 512).ids(), &[CLS]);
        assert_eq!(decode(encode("hello world", &v, 512).ids(), &v).unwrap(), "hello world");
        assert_eq!(decode(encode("HELLO,   there.", &v, 512).ids(), &v).unwrap(), "hello there");
        assert_eq!(encode("unseen", &v, 512).body(), &[UNK]);
        assert_eq!(decode(&[CLS], &v).unwrap(), "");
        let w = v.id("world").unwrap();
        assert_eq!(decode(&[CLS, w, 3, 0], &v).unwrap(), "world");
        assert!(decode(&[999], &v).is_err());
    }

    #[test]
    fn encode_truncates() {
        let v = build_vocab(&["a b c d e"], 50).unwrap();
        assert_eq!(encode("a b c d e", &v, 3).len(), 3);
    }

    #[test]
    fn text_round_trip() {
        let v = build_vocab(&["the cat sat on the mat"], 50).unwrap();
        let back = Vocabulary::from_text(&v.to_text(), Path::new("mem")).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn malformed_file_names_line() {
        let text = "#emofuse-vocab 1\n<pad>\n<cls>\n<oops>\n";
        match Vocabulary::from_text(text, Path::new("v.txt")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }
}
