//! Dataset ingestion, preprocessing and batching.

mod batch;
mod filter;
mod split;
mod tokenize;
mod vocab;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{make_batches, Batch, EncodedPair, IdMatrix};
pub use filter::{filter_pairs, is_probably_english, FilterConfig, FilterReport};
pub use split::{split_dataset, Splits};
pub use tokenize::{tokenize, tokenize_spans, truncate_to_tokens, TokenMode};
pub use vocab::{build_vocab, Vocab, BOS, EOS, PAD, RESERVED, UNK};

/// One natural-language/code pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub text: String,
    pub code: String,
    pub lang: String,
}

/// A record together with the byte range of its line in the source file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocatedRecord {
    pub record: PairRecord,
    pub offset: u64,
    pub len: u64,
}

/// Reads a JSON Lines dataset, keeping the byte span of every record.
/// Blank lines are skipped; duplicate ids are rejected.
pub fn read_jsonl_located(path: impl AsRef<Path>) -> Result<Vec<LocatedRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut offset = 0u64;
    let mut line = String::new();
    let mut lineno = 0usize;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        lineno += 1;
        let trimmed = line.trim_end_matches(['\n', '\r']);
        if !trimmed.trim().is_empty() {
            let record: PairRecord = serde_json::from_str(trimmed)
                .map_err(|e| Error::Data(format!("{}:{lineno}: {e}", path.display())))?;
            if !seen.insert(record.id.clone()) {
                return Err(Error::Data(format!(
                    "{}:{lineno}: duplicate id {:?}",
                    path.display(),
                    record.id
                )));
            }
            out.push(LocatedRecord {
                record,
                offset,
                len: trimmed.len() as u64,
            });
        }
        offset += n as u64;
    }
    Ok(out)
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<PairRecord>> {
    Ok(read_jsonl_located(path)?.into_iter().map(|r| r.record).collect())
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[PairRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_keeps_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let recs = vec![
            PairRecord {
                id: "a".into(),
                text: "adds two numbers".into(),
                code: "def add(a, b): return a + b".into(),
                lang: "python".into(),
            },
            PairRecord {
                id: "b".into(),
                text: "négative ünïcode".into(),
                code: "x = 1".into(),
                lang: "python".into(),
            },
        ];
        write_jsonl(&path, &recs).unwrap();
        let back = read_jsonl_located(&path).unwrap();
        assert_eq!(back.iter().map(|r| r.record.clone()).collect::<Vec<_>>(), recs);
        let bytes = std::fs::read(&path).unwrap();
        for r in &back {
            let span = &bytes[r.offset as usize..(r.offset + r.len) as usize];
            let parsed: PairRecord = serde_json::from_slice(span).unwrap();
            assert_eq!(parsed, r.record);
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let line = r#"{"id":"a","text":"t","code":"c","lang":"x"}"#;
        std::fs::write(&path, format!("{line}\n{line}\n")).unwrap();
        assert!(matches!(read_jsonl(&path), Err(Error::Data(_))));
    }
}
