//! Lossless partitioning of byte sequences into words.
//!
//! Three rules are supported: Unicode-whitespace splitting (whitespace is
//! appended to the preceding word), UAX #29 word boundaries with punctuation
//! handling, and fixed-size byte patches. Every rule satisfies
//! `join(split(x)) == x`.

pub mod fixture;
mod unicode;

use std::fmt;

use thiserror::Error;

pub use unicode::split_unicode;

/// Byte value of the word-start marker `[W]`. Never valid in UTF-8.
pub const WORD_MARKER: u8 = 0xFF;
/// Byte value of the end-of-document marker `[S]`. Never valid in UTF-8.
pub const END_OF_DOC: u8 = 0xFE;
/// Size of the byte alphabet.
pub const BYTE_VOCAB: usize = 256;
pub const DEFAULT_MAX_WORD_LEN: usize = 64;
/// Documents longer than this are truncated at a word boundary on ingestion.
pub const MAX_DOC_BYTES: usize = 16_384;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialBytes {
    pub word_marker: u8,
    pub end_of_doc: u8,
}

impl SpecialBytes {
    pub const DEFAULT: SpecialBytes = SpecialBytes {
        word_marker: WORD_MARKER,
        end_of_doc: END_OF_DOC,
    };

    pub fn is_valid(&self) -> bool {
        self.word_marker != self.end_of_doc && self.word_marker >= 0xF5 && self.end_of_doc >= 0xF5
    }
}

impl Default for SpecialBytes {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SegmentError {
    #[error("input is not valid UTF-8 (byte {0}); use whitespace or fixed splitting")]
    InvalidUtf8(usize),
    #[error("patch size must be at least 1")]
    InvalidPatchSize,
    #[error("max word length must be at least 2, got {0}")]
    InvalidCap(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Word {
    bytes: Vec<u8>,
    end_of_doc: bool,
}

impl Word {
    pub fn new(bytes: Vec<u8>) -> Self {
        Word {
            bytes,
            end_of_doc: false,
        }
    }

    /// The dummy word `[S]` that terminates a document.
    pub fn end_of_doc() -> Self {
        Word {
            bytes: vec![END_OF_DOC],
            end_of_doc: true,
        }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn is_end_of_doc(&self) -> bool {
        self.end_of_doc
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.end_of_doc {
            f.write_str("[S]")
        } else {
            f.write_str(&String::from_utf8_lossy(&self.bytes))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitRule {
    Whitespace,
    UnicodeWords,
    FixedSize(usize),
}

impl fmt::Display for SplitRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitRule::Whitespace => f.write_str("whitespace"),
            SplitRule::UnicodeWords => f.write_str("unicode"),
            SplitRule::FixedSize(p) => write!(f, "fixed{p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitDocument {
    pub words: Vec<Word>,
    pub rule: SplitRule,
    pub source_len: usize,
}

impl SplitDocument {
    fn from_slices(text: &[u8], bounds: &[usize], rule: SplitRule) -> Self {
        let words = bounds
            .windows(2)
            .map(|w| Word::new(text[w[0]..w[1]].to_vec()))
            .collect();
        SplitDocument {
            words,
            rule,
            source_len: text.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Number of real words, excluding any `[S]` dummy words.
    pub fn num_real_words(&self) -> usize {
        self.words.iter().filter(|w| !w.is_end_of_doc()).count()
    }

    pub fn has_end_of_doc(&self) -> bool {
        self.words.last().is_some_and(Word::is_end_of_doc)
    }

    /// Byte offset of the first byte of every real word.
    pub fn word_starts(&self) -> Vec<usize> {
        let mut pos = 0;
        let mut out = Vec::with_capacity(self.words.len());
        for w in self.words.iter().filter(|w| !w.is_end_of_doc()) {
            out.push(pos);
            pos += w.len();
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitterConfig {
    pub rule: SplitRule,
    pub max_word_len: usize,
}

impl Default for SplitterConfig {
    fn default() -> Self {
        SplitterConfig {
            rule: SplitRule::Whitespace,
            max_word_len: DEFAULT_MAX_WORD_LEN,
        }
    }
}

impl SplitterConfig {
    pub fn new(rule: SplitRule, max_word_len: usize) -> Result<Self, SegmentError> {
        let cfg = SplitterConfig { rule, max_word_len };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SegmentError> {
        if self.max_word_len < 2 {
            return Err(SegmentError::InvalidCap(self.max_word_len));
        }
        if self.rule == SplitRule::FixedSize(0) {
            return Err(SegmentError::InvalidPatchSize);
        }
        Ok(())
    }

    /// Splits `text` with the configured rule and applies the word-length cap.
    /// The end-of-document word is not appended.
    pub fn split(&self, text: &[u8]) -> Result<SplitDocument, SegmentError> {
        let doc = match self.rule {
            SplitRule::Whitespace => split_whitespace(text),
            SplitRule::UnicodeWords => split_unicode(text)?,
            SplitRule::FixedSize(p) => split_fixed(text, p)?,
        };
        enforce_max_word_len(doc, self.max_word_len)
    }

    /// Splits and appends the `[S]` dummy word.
    pub fn split_document(&self, text: &[u8]) -> Result<SplitDocument, SegmentError> {
        self.split(text).map(append_end_of_doc)
    }
}

fn is_ascii_ws(b: u8) -> bool {
    matches!(b, 0x09..=0x0D | 0x20)
}

/// Splits after every maximal whitespace run: each word is a run of
/// non-whitespace followed by all immediately trailing whitespace. Leading
/// whitespace at the start of the document becomes a prefix of the first word.
///
/// Valid UTF-8 uses the Unicode `White_Space` property; any other input is
/// split on ASCII whitespace bytes only.
pub fn split_whitespace(text: &[u8]) -> SplitDocument {
    let mut bounds = vec![0];
    match std::str::from_utf8(text) {
        Ok(s) => {
            let mut prev_ws = false;
            let mut seen_non_ws = false;
            for (i, c) in s.char_indices() {
                let ws = c.is_whitespace();
                if !ws && prev_ws && seen_non_ws {
                    bounds.push(i);
                }
                seen_non_ws |= !ws;
                prev_ws = ws;
            }
        }
        Err(_) => {
            let mut prev_ws = false;
            let mut seen_non_ws = false;
            for (i, &b) in text.iter().enumerate() {
                let ws = is_ascii_ws(b);
                if !ws && prev_ws && seen_non_ws {
                    bounds.push(i);
                }
                seen_non_ws |= !ws;
                prev_ws = ws;
            }
        }
    }
    if !text.is_empty() {
        bounds.push(text.len());
    } else {
        bounds.clear();
    }
    SplitDocument::from_slices(text, &bounds, SplitRule::Whitespace)
}

/// Cuts `text` into consecutive patches of `patch_size` bytes; the last patch
/// may be shorter.
pub fn split_fixed(text: &[u8], patch_size: usize) -> Result<SplitDocument, SegmentError> {
    if patch_size == 0 {
        return Err(SegmentError::InvalidPatchSize);
    }
    Ok(SplitDocument {
        words: text.chunks(patch_size).map(|c| Word::new(c.to_vec())).collect(),
        rule: SplitRule::FixedSize(patch_size),
        source_len: text.len(),
    })
}

/// Appends the `[S]` dummy word. Not idempotent: each call appends one more.
pub fn append_end_of_doc(mut doc: SplitDocument) -> SplitDocument {
    doc.words.push(Word::end_of_doc());
    doc
}

/// Chunks every word longer than `cap` bytes into pieces of at most `cap`.
pub fn enforce_max_word_len(doc: SplitDocument, cap: usize) -> Result<SplitDocument, SegmentError> {
    if cap < 2 {
        return Err(SegmentError::InvalidCap(cap));
    }
    if doc.words.iter().all(|w| w.len() <= cap) {
        return Ok(doc);
    }
    let mut words = Vec::with_capacity(doc.words.len());
    for w in doc.words {
        if w.is_end_of_doc() || w.len() <= cap {
            words.push(w);
        } else {
            words.extend(w.bytes.chunks(cap).map(|c| Word::new(c.to_vec())));
        }
    }
    Ok(SplitDocument { words, ..doc })
}

/// Concatenates all word bytes, skipping `[S]` dummy words.
pub fn join(doc: &SplitDocument) -> Vec<u8> {
    let mut out = Vec::with_capacity(doc.source_len);
    for w in doc.words.iter().filter(|w| !w.is_end_of_doc()) {
        out.extend_from_slice(&w.bytes);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(doc: &SplitDocument) -> Vec<String> {
        doc.words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn whitespace_examples() {
        assert_eq!(words(&split_whitespace(b"hello world")), ["hello ", "world"]);
        assert_eq!(words(&split_whitespace(b"a  b\nc")), ["a  ", "b\n", "c"]);
        assert_eq!(words(&split_whitespace(b"  x")), ["  x"]);
        assert_eq!(words(&split_whitespace(b"   ")), ["   "]);
        assert!(split_whitespace(b"").is_empty());
        // U+3000 ideographic space is Unicode whitespace
        assert_eq!(
            words(&split_whitespace("a\u{3000}b".as_bytes())),
            ["a\u{3000}", "b"]
        );
    }

    #[test]
    fn whitespace_invalid_utf8_falls_back_to_ascii() {
        let text = b"ab\xff\xa0cd e";
        let doc = split_whitespace(text);
        assert_eq!(doc.words.len(), 2);
        assert_eq!(doc.words[0].bytes(), b"ab\xff\xa0cd ");
        assert_eq!(join(&doc), text);
    }

    #[test]
    fn fixed_examples() {
        let doc = split_fixed(b"abcdefghijklmnop", 8).unwrap();
        assert_eq!(words(&doc), ["abcdefgh", "ijklmnop"]);
        assert_eq!(words(&split_fixed(b"abc", 8).unwrap()), ["abc"]);
        assert!(split_fixed(b"", 8).unwrap().is_empty());
        assert_eq!(split_fixed(b"abc", 0), Err(SegmentError::InvalidPatchSize));
    }

    #[test]
    fn end_of_doc_appends_every_time() {
        let doc = append_end_of_doc(split_whitespace(b"hi"));
        assert_eq!(words(&doc), ["hi", "[S]"]);
        assert!(doc.has_end_of_doc());
        let empty = append_end_of_doc(split_whitespace(b""));
        assert_eq!(words(&empty), ["[S]"]);
        let twice = append_end_of_doc(doc.clone());
        assert_eq!(twice.len(), 3);
        assert_eq!(join(&twice), b"hi");
    }

    #[test]
    fn cap_chunks_long_words() {
        let doc = enforce_max_word_len(split_whitespace(b"aaaaa"), 2).unwrap();
        assert_eq!(words(&doc), ["aa", "aa", "a"]);
        let doc = enforce_max_word_len(split_whitespace(b"hi "), 64).unwrap();
        assert_eq!(words(&doc), ["hi "]);
        assert_eq!(
            enforce_max_word_len(split_whitespace(b"x"), 1),
            Err(SegmentError::InvalidCap(1))
        );
    }

    #[test]
    fn word_starts_skip_dummy() {
        let doc = append_end_of_doc(split_whitespace(b"ab cd"));
        assert_eq!(doc.word_starts(), vec![0, 3]);
        assert_eq!(doc.num_real_words(), 2);
    }

    proptest! {
        #[test]
        fn whitespace_lossless_utf8(s in "\\PC{0,64}") {
            let doc = split_whitespace(s.as_bytes());
            prop_assert_eq!(join(&doc), s.as_bytes());
            for w in doc.words.iter().skip(1) {
                let c = std::str::from_utf8(w.bytes()).unwrap().chars().next().unwrap();
                prop_assert!(!c.is_whitespace());
            }
        }

        #[test]
        fn whitespace_lossless_bytes(b in proptest::collection::vec(any::<u8>(), 0..64)) {
            prop_assert_eq!(join(&split_whitespace(&b)), b);
        }

        #[test]
        fn fixed_word_count(b in proptest::collection::vec(any::<u8>(), 1..100), p in 1usize..12) {
            let doc = split_fixed(&b, p).unwrap();
            prop_assert_eq!(doc.len(), b.len().div_ceil(p));
            prop_assert_eq!(join(&doc), b);
        }

        #[test]
        fn cap_preserves_bytes(b in proptest::collection::vec(b'a'..=b'z', 200..=200)) {
            let doc = enforce_max_word_len(split_whitespace(&b), 64).unwrap();
            prop_assert_eq!(doc.len(), 4);
            prop_assert!(doc.words.iter().all(|w| w.len() <= 64));
            prop_assert_eq!(join(&doc), b);
        }
    }
}
