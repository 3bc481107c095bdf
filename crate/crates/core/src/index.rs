//! Exact cosine search over code embeddings, plus context export for an
//! external generator.
//!
//! File layout: one JSON header line, the `M × d_emb` matrix as row-major
//! little-endian `f32`, then a JSON array of per-row metadata.

use std::cmp::Ordering;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{truncate_to_tokens, tokenize, LocatedRecord, PairRecord, TokenMode, Vocab};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::ops::dot;
use crate::tensor::Tensor;
use crate::trainer::Model;

pub const INDEX_FORMAT_VERSION: u32 = 1;
const EMBED_CHUNK: usize = 64;

/// Hex SHA-256 of a file's bytes.
pub fn file_fingerprint(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexHeader {
    pub format_version: u32,
    pub config: EncoderConfig,
    /// Fingerprint of the checkpoint that produced the rows.
    pub fingerprint: String,
    pub m: usize,
    pub d_emb: usize,
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub max_code_tokens: usize,
    pub max_text_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub lang: String,
    pub source: PathBuf,
    /// Byte span of the record's line in `source`.
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub header: IndexHeader,
    /// `[m × d_emb]`, unit-norm rows.
    pub matrix: Tensor<f32>,
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub k: usize,
    pub hits: Vec<Hit>,
}

/// Where an index came from; recorded in its header.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexSource {
    pub checkpoint: PathBuf,
    pub fingerprint: String,
    pub vocab: PathBuf,
    pub corpus: PathBuf,
    pub max_code_tokens: usize,
    pub max_text_tokens: usize,
}

impl EmbeddingIndex {
    /// Embeds the code side of every record.
    pub fn build(model: &Model<f64>, vocab: &Vocab, records: &[LocatedRecord], source: IndexSource) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("cannot index an empty corpus".into()));
        }
        let codes: Vec<Vec<u32>> = records
            .iter()
            .map(|r| vocab.encode_str(&r.record.code, TokenMode::Code, source.max_code_tokens))
            .collect();
        let matrix = model.encoder.embed_all(&codes, model.adapter.as_ref(), EMBED_CHUNK)?.cast();
        let cfg = &model.encoder.config;
        Ok(Self {
            header: IndexHeader {
                format_version: INDEX_FORMAT_VERSION,
                config: *cfg,
                fingerprint: source.fingerprint,
                m: records.len(),
                d_emb: cfg.d_emb,
                checkpoint: source.checkpoint,
                vocab: source.vocab,
                max_code_tokens: source.max_code_tokens,
                max_text_tokens: source.max_text_tokens,
            },
            matrix,
            entries: records
                .iter()
                .map(|r| IndexEntry {
                    id: r.record.id.clone(),
                    lang: r.record.lang.clone(),
                    source: source.corpus.clone(),
                    offset: r.offset,
                    len: r.len,
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        for v in self.matrix.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&serde_json::to_vec(&self.entries)?);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Index(format!("corrupt index: {what}"));
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("missing header"))?;
        let header: IndexHeader = serde_json::from_slice(&bytes[..nl])?;
        if header.format_version != INDEX_FORMAT_VERSION {
            return Err(corrupt("unsupported format version"));
        }
        let n = header.m * header.d_emb;
        let start = nl + 1;
        let raw = bytes.get(start..start + 4 * n).ok_or_else(|| corrupt("truncated matrix"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let matrix = Tensor::new(&[header.m, header.d_emb], data)?;
        let entries: Vec<IndexEntry> = serde_json::from_slice(&bytes[start + 4 * n..])?;
        if entries.len() != header.m {
            return Err(corrupt("row count differs from metadata count"));
        }
        Ok(Self { header, matrix, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Fails unless `fingerprint` is the one the index was built with.
    pub fn check_fingerprint(&self, fingerprint: &str) -> Result<()> {
        if fingerprint != self.header.fingerprint {
            return Err(Error::Fingerprint(format!(
                "index was built by checkpoint {} but {fingerprint} was supplied",
                self.header.fingerprint
            )));
        }
        Ok(())
    }

    /// Embeds a query through the same encoder path as any other text.
    pub fn embed_query(&self, model: &Model<f64>, vocab: &Vocab, text: &str) -> Result<Vec<f64>> {
        let ids = vocab.encode_str(text, TokenMode::Text, self.header.max_text_tokens);
        model.encoder.encode(&ids, model.adapter.as_ref())
    }

    /// Full-scan top-`k` by cosine score; ties go to the smaller id.
    pub fn search(&self, query: &[f64], k: usize) -> Result<QueryResult> {
        if self.is_empty() {
            return Err(Error::Index("index is empty".into()));
        }
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if query.len() != self.header.d_emb {
            return Err(Error::Dimension(format!(
                "query of width {} against index of width {}",
                query.len(),
                self.header.d_emb
            )));
        }
        let k = if k > self.len() {
            log::warn!("k={k} exceeds index size {}; returning all rows", self.len());
            self.len()
        } else {
            k
        };
        let mut hits: Vec<Hit> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let row: Vec<f64> = self.matrix.row(i).iter().map(|&v| f64::from(v)).collect();
                Hit {
                    id: e.id.clone(),
                    score: dot(query, &row),
                }
            })
            .collect();
        hits.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| a.id.cmp(&b.id)));
        hits.truncate(k);
        Ok(QueryResult { k, hits })
    }

    pub fn entry(&self, id: &str) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Reads a row's record back from its source file.
    pub fn record(&self, entry: &IndexEntry, base_dir: &Path) -> Result<PairRecord> {
        use std::io::{Read, Seek, SeekFrom};
        let path = base_dir.join(&entry.source);
        let mut f = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        f.seek(SeekFrom::Start(entry.offset)).map_err(|e| Error::io(&path, e))?;
        let mut buf = vec![0u8; entry.len as usize];
        f.read_exact(&mut buf).map_err(|e| Error::io(&path, e))?;
        let rec: PairRecord = serde_json::from_slice(&buf)?;
        if rec.id != entry.id {
            return Err(Error::Index(format!(
                "source {} changed: expected record {} at offset {}",
                path.display(),
                entry.id,
                entry.offset
            )));
        }
        Ok(rec)
    }

    /// Writes the hits' code as `### <id> (<lang>)` blocks in rank order,
    /// keeping at most `budget_tokens` code tokens in total. Returns the
    /// number of code tokens written.
    pub fn export_context(
        &self,
        result: &QueryResult,
        budget_tokens: usize,
        base_dir: &Path,
        out: &mut dyn Write,
    ) -> Result<usize> {
        let mut used = 0usize;
        for (rank, hit) in result.hits.iter().enumerate() {
            let remaining = budget_tokens - used;
            if remaining == 0 {
                break;
            }
            let entry = self.entry(&hit.id).ok_or_else(|| Error::Index(format!("unknown id {}", hit.id)))?;
            let rec = self.record(entry, base_dir)?;
            let n = tokenize(&rec.code, TokenMode::Code).len();
            let code = if n > remaining {
                if rank == 0 {
                    log::warn!("budget of {budget_tokens} tokens is smaller than the first snippet ({n}); truncating it");
                }
                truncate_to_tokens(&rec.code, remaining)
            } else {
                rec.code.as_str()
            };
            used += n.min(remaining);
            writeln!(out, "### {} ({})\n{}", rec.id, rec.lang, code).map_err(|e| Error::io("<context>", e))?;
        }
        Ok(used)
    }
}
