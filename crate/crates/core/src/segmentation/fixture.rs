//! Segmentation fixture files.
//!
//! One case per line: `input<TAB>word1|word2|...`. Inside both fields the
//! characters tab, newline, `|` and backslash are written as `\t`, `\n`, `\|`
//! and `\\`. Blank lines and lines starting with `#` are ignored.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixtureCase {
    pub line: usize,
    pub input: String,
    pub words: Vec<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FixtureError {
    #[error("line {0}: missing tab separator")]
    MissingTab(usize),
    #[error("line {0}: bad escape sequence")]
    BadEscape(usize),
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '|' => out.push_str("\\|"),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out
}

/// Splits `field` at unescaped `sep` (if any) and unescapes each part.
fn unescape_split(field: &str, sep: Option<char>, line: usize) -> Result<Vec<String>, FixtureError> {
    let mut parts = vec![String::new()];
    let mut chars = field.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => {
                let e = match chars.next() {
                    Some('t') => '\t',
                    Some('n') => '\n',
                    Some('|') => '|',
                    Some('\\') => '\\',
                    _ => return Err(FixtureError::BadEscape(line)),
                };
                parts.last_mut().unwrap().push(e);
            }
            c if Some(c) == sep => parts.push(String::new()),
            c => parts.last_mut().unwrap().push(c),
        }
    }
    Ok(parts)
}

pub fn parse(text: &str) -> Result<Vec<FixtureCase>, FixtureError> {
    let mut cases = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let (input, expected) = raw.split_once('\t').ok_or(FixtureError::MissingTab(line))?;
        let input = unescape_split(input, None, line)?.remove(0);
        let words = if expected.is_empty() {
            Vec::new()
        } else {
            unescape_split(expected, Some('|'), line)?
        };
        cases.push(FixtureCase { line, input, words });
    }
    Ok(cases)
}

pub fn format_case(input: &str, words: &[String]) -> String {
    let words: Vec<String> = words.iter().map(|w| escape(w)).collect();
    format!("{}\t{}", escape(input), words.join("|"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_escapes() {
        let cases = parse("# comment\na\\tb\\|c\ta\\tb\\||c\n\nx\tx\n").unwrap();
        assert_eq!(cases.len(), 2);
        assert_eq!(cases[0].input, "a\tb|c");
        assert_eq!(cases[0].words, vec!["a\tb|".to_string(), "c".to_string()]);
        assert_eq!(cases[1].line, 4);
    }

    #[test]
    fn format_roundtrip() {
        let words = vec!["a\\ ".to_string(), "|\n".to_string()];
        let line = format_case("a\\ |\n", &words);
        let cases = parse(&line).unwrap();
        assert_eq!(cases[0].input, "a\\ |\n");
        assert_eq!(cases[0].words, words);
    }

    #[test]
    fn errors() {
        assert_eq!(parse("abc"), Err(FixtureError::MissingTab(1)));
        assert_eq!(parse("a\\q\tb"), Err(FixtureError::BadEscape(1)));
    }
}
