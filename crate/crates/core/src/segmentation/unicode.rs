//! UAX #29 word-boundary splitting with punctuation handling.

use unicode_general_category::{get_general_category, GeneralCategory};
use unicode_segmentation::UnicodeSegmentation;

use super::{SegmentError, SplitDocument, SplitRule};

/// Characters with the UAX #29 `MidLetter`, `MidNum`, `MidNumLet` or
/// `Single_Quote` word-break property. Between two word characters they stay
/// inside the word ("don't", "3.14", "1,000").
fn is_mid_word(c: char) -> bool {
    matches!(
        c,
        '\'' | '.'
            | ','
            | ':'
            | ';'
            | '\u{00B7}'
            | '\u{0387}'
            | '\u{055F}'
            | '\u{05F4}'
            | '\u{2027}'
            | '\u{FE13}'
            | '\u{FE55}'
            | '\u{FF1A}'
            | '\u{2018}'
            | '\u{2019}'
            | '\u{2024}'
            | '\u{FE52}'
            | '\u{FF07}'
            | '\u{FF0E}'
            | '\u{037E}'
            | '\u{0589}'
            | '\u{060C}'
            | '\u{060D}'
            | '\u{066C}'
            | '\u{07F8}'
            | '\u{2044}'
            | '\u{FE10}'
            | '\u{FE14}'
            | '\u{FE50}'
            | '\u{FE54}'
            | '\u{FF0C}'
            | '\u{FF1B}'
    )
}

/// General categories P* and S*.
fn is_punct(c: char) -> bool {
    use GeneralCategory::*;
    matches!(
        get_general_category(c),
        ConnectorPunctuation
            | DashPunctuation
            | OpenPunctuation
            | ClosePunctuation
            | InitialPunctuation
            | FinalPunctuation
            | OtherPunctuation
            | MathSymbol
            | CurrencySymbol
            | ModifierSymbol
            | OtherSymbol
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Piece {
    Space,
    Punct,
    Content,
}

/// Cuts one UAX #29 segment further at punctuation graphemes, keeping
/// mid-word punctuation flanked by word characters in place.
fn split_segment(seg: &str, base: usize, out: &mut Vec<(usize, Piece)>) {
    if seg.chars().next().is_some_and(char::is_whitespace) {
        out.push((base, Piece::Space));
        return;
    }
    let graphemes: Vec<(usize, &str)> = seg.grapheme_indices(true).collect();
    let first_char = |g: &str| g.chars().next().unwrap_or(' ');
    let punct: Vec<bool> = graphemes.iter().map(|(_, g)| is_punct(first_char(g))).collect();
    let mut last = None;
    for (k, (off, g)) in graphemes.iter().enumerate() {
        let kind = if punct[k] {
            let internal = k > 0
                && k + 1 < graphemes.len()
                && !punct[k - 1]
                && !punct[k + 1]
                && is_mid_word(first_char(g));
            if internal {
                Piece::Content
            } else {
                Piece::Punct
            }
        } else {
            Piece::Content
        };
        // consecutive content graphemes form one piece; punctuation is always its own piece
        if kind == Piece::Punct || last != Some(Piece::Content) {
            out.push((base + off, kind));
        }
        last = Some(kind);
    }
}

/// Splits valid UTF-8 at UAX #29 word boundaries and at punctuation, then
/// merges so that each word absorbs its leading whitespace run and its
/// trailing punctuation run.
pub fn split_unicode(text: &[u8]) -> Result<SplitDocument, SegmentError> {
    let s = std::str::from_utf8(text).map_err(|e| SegmentError::InvalidUtf8(e.valid_up_to()))?;
    let mut pieces = Vec::new();
    for (off, seg) in s.split_word_bound_indices() {
        split_segment(seg, off, &mut pieces);
    }

    let mut bounds = Vec::new();
    // whether the word under construction already has content or punctuation
    let mut has_body = false;
    for (off, kind) in pieces {
        let start_new = match kind {
            Piece::Space | Piece::Content => has_body,
            Piece::Punct => false,
        };
        if bounds.is_empty() || start_new {
            bounds.push(off);
            has_body = false;
        }
        has_body |= kind != Piece::Space;
    }
    if !text.is_empty() {
        bounds.push(text.len());
    }
    Ok(SplitDocument::from_slices(text, &bounds, SplitRule::UnicodeWords))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::join;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<String> {
        split_unicode(s.as_bytes())
            .unwrap()
            .words
            .iter()
            .map(|w| w.to_string())
            .collect()
    }

    #[test]
    fn examples() {
        assert_eq!(words("don't stop."), ["don't", " stop."]);
        assert_eq!(words("x"), ["x"]);
        assert_eq!(words("a,b"), ["a,", "b"]);
        assert_eq!(words("pi is 3.14!"), ["pi", " is", " 3.14!"]);
        assert_eq!(words("foo(bar)"), ["foo(", "bar)"]);
        assert_eq!(words("  lead"), ["  lead"]);
        assert!(words("").is_empty());
    }

    #[test]
    fn cjk_splits_per_ideograph() {
        assert_eq!(words("我爱你。"), ["我", "爱", "你。"]);
    }

    #[test]
    fn rejects_invalid_utf8() {
        assert_eq!(split_unicode(b"ab\xffc"), Err(SegmentError::InvalidUtf8(2)));
    }

    proptest! {
        #[test]
        fn lossless(s in "\\PC{0,64}") {
            let doc = split_unicode(s.as_bytes()).unwrap();
            prop_assert_eq!(join(&doc), s.as_bytes());
            prop_assert!(doc.words.iter().all(|w| !w.is_empty()));
        }
    }
}
