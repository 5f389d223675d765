//! Corpus ingestion.
//!
//! A path is either a directory of `.txt` files (one document each, in file
//! name order), a `.jsonl` file of records with a string `text` field, or a
//! single text file holding one document.

use std::fs;
use std::path::Path;

use super::PersistError;
use crate::segmentation::{SplitterConfig, MAX_DOC_BYTES};
use crate::training::truncate_at_word;

fn data_err(path: &Path, msg: impl std::fmt::Display) -> PersistError {
    PersistError::Data(format!("{}: {msg}", path.display()))
}

pub fn load_corpus(path: &Path) -> Result<Vec<Vec<u8>>, PersistError> {
    if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)
            .map_err(|e| data_err(path, e))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(data_err(path, "no .txt files"));
        }
        return files.iter().map(|f| fs::read(f).map_err(|e| data_err(f, e))).collect();
    }
    let bytes = fs::read(path).map_err(|e| data_err(path, e))?;
    if path.extension().is_some_and(|x| x == "jsonl") {
        return parse_jsonl(path, &bytes);
    }
    Ok(vec![bytes])
}

fn parse_jsonl(path: &Path, bytes: &[u8]) -> Result<Vec<Vec<u8>>, PersistError> {
    let text = std::str::from_utf8(bytes).map_err(|_| data_err(path, "not UTF-8"))?;
    let mut docs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| data_err(path, format!("line {}: {e}", n + 1)))?;
        let t = v
            .get("text")
            .and_then(|t| t.as_str())
            .ok_or_else(|| data_err(path, format!("line {}: no string field \"text\"", n + 1)))?;
        docs.push(t.as_bytes().to_vec());
    }
    Ok(docs)
}

/// Cuts every document longer than the document cap at a word boundary.
pub fn truncate_documents(docs: Vec<Vec<u8>>, splitter: &SplitterConfig) -> Result<Vec<Vec<u8>>, PersistError> {
    docs.into_iter()
        .map(|mut d| {
            let keep = truncate_at_word(&d, MAX_DOC_BYTES, splitter).map_err(|e| PersistError::Data(e.to_string()))?;
            d.truncate(keep);
            Ok(d)
        })
        .collect()
}
