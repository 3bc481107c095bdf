//! Checkpoint files.
//!
//! Layout: 8-byte magic, little-endian `u32` header length, the header as
//! JSON, then every listed tensor as row-major little-endian `f32`. Adapter
//! checkpoints hold only adapter tensors; the frozen base is referenced by
//! how to rebuild it plus its fingerprint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::peft::{Adapter, AdapterConfig, Method};
use crate::scalar::Scalar;
use crate::tensor::{Parameter, Tensor};
use crate::trainer::Model;

pub const MAGIC: &[u8; 8] = b"CSPEFTCK";
pub const FORMAT_VERSION: u32 = 1;

/// How to obtain the frozen base an adapter was trained against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BaseRef {
    /// `EncoderWeights::init(config, seed)`.
    Seeded { seed: u64, fingerprint: String },
    /// A full checkpoint; relative paths resolve against the referring
    /// checkpoint's directory.
    Checkpoint { path: PathBuf, fingerprint: String },
}

impl BaseRef {
    pub fn fingerprint(&self) -> &str {
        match self {
            BaseRef::Seeded { fingerprint, .. } | BaseRef::Checkpoint { fingerprint, .. } => fingerprint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub id: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub method: Method,
    pub adapter: Option<AdapterConfig>,
    pub encoder: EncoderConfig,
    pub vocab_hash: String,
    pub seed: u64,
    pub step: u64,
    pub temperature: f64,
    /// `None` for full checkpoints, which carry the base themselves.
    pub base: Option<BaseRef>,
    /// AdaLoRA rank masks, one per adapted matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_masks: Option<Vec<Vec<bool>>>,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

/// Run metadata stored alongside the tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub vocab_hash: String,
    pub seed: u64,
    pub step: u64,
    pub base: Option<BaseRef>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor<f32>>,
}

fn persisted<T: Scalar>(model: &Model<T>, method: Method) -> Vec<&Parameter<T>> {
    match (&model.adapter, method) {
        (Some(a), _) => a.params(),
        (None, Method::Full) => model.encoder.params(),
        (None, _) => Vec::new(),
    }
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, method: Method, meta: CheckpointMeta) -> Result<Self> {
        let adapter_method = model.adapter.as_ref().map(Adapter::method);
        if method.is_adapter() != adapter_method.is_some() || adapter_method.is_some_and(|m| m != method) {
            return Err(Error::Checkpoint(format!("method {method} does not match the model's adapter")));
        }
        if method != Method::Full && meta.base.is_none() {
            return Err(Error::Checkpoint("non-full checkpoints need a base reference".into()));
        }
        let params = persisted(model, method);
        let tensors: Vec<Tensor<f32>> = params.iter().map(|p| p.tensor.cast()).collect();
        let rank_masks = match &model.adapter {
            Some(Adapter::Adalora(s)) => Some(s.triplets.iter().map(|t| t.mask.clone()).collect()),
            _ => None,
        };
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            method,
            adapter: model.adapter.as_ref().map(Adapter::config),
            encoder: model.encoder.config,
            vocab_hash: meta.vocab_hash,
            seed: meta.seed,
            step: meta.step,
            temperature: model.temperature(),
            base: meta.base,
            rank_masks,
            tensors: params
                .iter()
                .map(|p| TensorEntry {
                    id: p.id.clone(),
                    shape: p.tensor.shape().to_vec(),
                })
                .collect(),
            payload_sha256: hex::encode(Sha256::digest(payload(&tensors))),
        };
        Ok(Self { header, tensors })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let len = u32::try_from(header.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
        let mut out = Vec::with_capacity(12 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload(&self.tensors));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Checkpoint(format!("corrupt checkpoint: {what}"));
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + len).ok_or_else(|| corrupt("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let data = &bytes[12 + len..];
        if hex::encode(Sha256::digest(data)) != header.payload_sha256 {
            return Err(corrupt("payload checksum mismatch"));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut pos = 0usize;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = data.get(pos..pos + 4 * n).ok_or_else(|| corrupt("truncated payload"))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Tensor::new(&e.shape, values)?);
            pos += 4 * n;
        }
        if pos != data.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Fingerprint of the encoder this checkpoint runs on.
    pub fn base_fingerprint(&self) -> Result<String> {
        match &self.header.base {
            Some(b) => Ok(b.fingerprint().to_string()),
            None => Ok(self.rebuild_full::<f64>()?.fingerprint()),
        }
    }

    fn rebuild_full<T: Scalar>(&self) -> Result<EncoderWeights<T>> {
        let mut enc = EncoderWeights::init(self.header.encoder, self.header.seed)?;
        self.fill(enc.params_mut())?;
        Ok(enc)
    }

    /// Copies stored tensors into `params`; the id sets must match exactly.
    fn fill<T: Scalar>(&self, params: Vec<&mut Parameter<T>>) -> Result<()> {
        if params.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for (p, (entry, t)) in params.into_iter().zip(self.header.tensors.iter().zip(&self.tensors)) {
            if p.id != entry.id || p.tensor.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match model tensor {} {:?}",
                    entry.id,
                    t.shape(),
                    p.id,
                    p.tensor.shape()
                )));
            }
            p.tensor = t.cast();
        }
        Ok(())
    }

    /// Rebuilds the model. `dir` resolves relative base paths; a given
    /// `vocab_hash` must match the header.
    pub fn restore<T: Scalar>(&self, dir: &Path, vocab_hash: Option<&str>) -> Result<Model<T>> {
        let h = &self.header;
        if let Some(v) = vocab_hash {
            if v != h.vocab_hash {
                return Err(Error::Fingerprint(format!(
                    "vocabulary hash {v} does not match checkpoint {}",
                    h.vocab_hash
                )));
            }
        }
        let mut encoder = match &h.base {
            None => {
                if h.method != Method::Full {
                    return Err(Error::Checkpoint(format!("{} checkpoint lacks a base reference", h.method)));
                }
                self.rebuild_full()?
            }
            Some(BaseRef::Seeded { seed, .. }) => EncoderWeights::init(h.encoder, *seed)?,
            Some(BaseRef::Checkpoint { path, .. }) => {
                let full = Checkpoint::load(dir.join(path))?;
                if full.header.encoder != h.encoder {
                    return Err(Error::Fingerprint("base checkpoint has a different encoder config".into()));
                }
                full.rebuild_full()?
            }
        };
        if let Some(b) = &h.base {
            let actual = encoder.fingerprint();
            if actual != b.fingerprint() {
                return Err(Error::Fingerprint(format!(
                    "base fingerprint {actual} does not match recorded {}",
                    b.fingerprint()
                )));
            }
        }
        encoder.set_trainable(false);
        let adapter = match &h.adapter {
            Some(cfg) => {
                let mut a = Adapter::attach(cfg, &mut encoder, h.seed)?;
                self.fill(a.params_mut())?;
                if let (Adapter::Adalora(s), Some(masks)) = (&mut a, &h.rank_masks) {
                    if masks.len() != s.triplets.len() {
                        return Err(Error::Checkpoint("rank mask count mismatch".into()));
                    }
                    for (t, m) in s.triplets.iter_mut().zip(masks) {
                        if m.len() != t.mask.len() {
                            return Err(Error::Checkpoint("rank mask length mismatch".into()));
                        }
                        t.mask.clone_from(m);
                    }
                }
                Some(a)
            }
            None => None,
        };
        Ok(Model::new(encoder, adapter, h.temperature, false))
    }
}

fn payload(tensors: &[Tensor<f32>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * tensors.iter().map(Tensor::numel).sum::<usize>());
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}
