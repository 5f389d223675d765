use hat_core::segmentation::fixture::{parse, FixtureCase};
use hat_core::segmentation::{join, SplitRule, SplitterConfig};

fn check(file: &str, rule: SplitRule) {
    let path = format!("{}/tests/data/{file}", env!("CARGO_MANIFEST_DIR"));
    let cases = parse(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert!(cases.len() >= 8, "{file}: {} cases", cases.len());
    let splitter = SplitterConfig::new(rule, 64).unwrap();
    for FixtureCase { line, input, words } in cases {
        let doc = splitter.split(input.as_bytes()).unwrap();
        let got: Vec<String> = doc.words.iter().map(|w| String::from_utf8(w.bytes().to_vec()).unwrap()).collect();
        assert_eq!(got, words, "{file}:{line}");
        assert_eq!(join(&doc), input.as_bytes());
    }
}

#[test]
fn whitespace_fixture() {
    check("whitespace_words.tsv", SplitRule::Whitespace);
}

#[test]
fn unicode_fixture() {
    check("unicode_words.tsv", SplitRule::UnicodeWords);
}
