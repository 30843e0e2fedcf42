//! Checkpoint and dataset files.
//!
//! Both formats share the same framing, all integers little-endian:
//!
//! ```text
//! magic     4 bytes   "RLAB" (checkpoint) or "RLDS" (dataset)
//! version   u32       1
//! hdr_len   u64       length of the JSON header that follows
//! header    hdr_len bytes of UTF-8 JSON
//! body
//! ```
//!
//! A checkpoint body is the concatenation of every tensor's IEEE-754
//! single-precision buffer, in directory order, with no padding. A dataset
//! body is `count` records of `len: u32` followed by `len` token ids as `u32`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lora::LoraConfig;
use crate::tensor::Tensor;
use crate::transformer::{ModelConfig, ModelWeights};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RLAB";
pub const DATASET_MAGIC: [u8; 4] = *b"RLDS";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("file truncated: needed {needed} bytes, found {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unknown format version {0}")]
    UnknownVersion(u32),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor {name} overlaps the previous tensor or leaves a gap (offset {offset}, expected {expected})")]
    OverlappingOffsets {
        name: String,
        offset: u64,
        expected: u64,
    },
    #[error("payload holds {actual} bytes, directory describes {expected}")]
    PayloadLength { expected: u64, actual: u64 },
    #[error("tensor {name}: {reason}")]
    BadTensor { name: String, reason: String },
    #[error("dataset record {index}: {reason}")]
    BadRecord { index: u64, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type PResult<T> = Result<T, PersistError>;

/// One entry of a checkpoint's tensor directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    /// Hex SHA-256 of the tensor's bytes.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: Option<ModelConfig>,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

/// In-memory contents of a checkpoint file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config: Option<ModelConfig>,
    pub lora: Option<LoraConfig>,
    pub metadata: BTreeMap<String, String>,
    pub weights: ModelWeights,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn tensor_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn frame(magic: [u8; 4], header: &[u8], body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + body.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(body);
    out
}

/// Splits a framed file into header bytes and body.
fn unframe(bytes: &[u8], magic: [u8; 4]) -> PResult<(&[u8], &[u8])> {
    let available = bytes.len() as u64;
    if bytes.len() < 4 {
        return Err(PersistError::Truncated {
            needed: PREAMBLE as u64,
            available,
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != magic {
        return Err(PersistError::BadMagic(found));
    }
    if bytes.len() < PREAMBLE {
        return Err(PersistError::Truncated {
            needed: PREAMBLE as u64,
            available,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(PersistError::UnknownVersion(version));
    }
    let hdr_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let needed = (PREAMBLE as u64).saturating_add(hdr_len);
    if needed > available {
        return Err(PersistError::Truncated { needed, available });
    }
    let end = needed as usize;
    Ok((&bytes[PREAMBLE..end], &bytes[end..]))
}

impl Checkpoint {
    pub fn model(config: ModelConfig, weights: ModelWeights) -> Self {
        Self {
            config: Some(config),
            weights,
            ..Self::default()
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        let mut tensors = Vec::with_capacity(self.weights.len());
        for (name, t) in self.weights.iter() {
            let bytes = tensor_bytes(t);
            tensors.push(TensorEntry {
                name: name.to_string(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset: body.len() as u64,
                length: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            });
            body.extend_from_slice(&bytes);
        }
        let header = CheckpointHeader {
            config: self.config.clone(),
            lora: self.lora.clone(),
            metadata: self.metadata.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        frame(CHECKPOINT_MAGIC, &header, &body)
    }

    /// Parses and structurally validates a checkpoint. Checksums are not
    /// verified here; see [`verify_checksums`].
    pub fn decode(bytes: &[u8]) -> PResult<Self> {
        let (header, payload) = read_checkpoint_header(bytes)?;
        let mut weights = ModelWeights::new();
        for e in &header.tensors {
            let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| PersistError::BadTensor {
                name: e.name.clone(),
                reason: err.to_string(),
            })?;
            weights.insert(e.name.clone(), t);
        }
        Ok(Self {
            config: header.config,
            lora: header.lora,
            metadata: header.metadata,
            weights,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> PResult<()> {
        write_atomic(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> PResult<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// SHA-256 of the encoded file.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.encode())
    }
}

/// Parses the header and checks the directory against the payload.
pub fn read_checkpoint_header(bytes: &[u8]) -> PResult<(CheckpointHeader, &[u8])> {
    let (header, payload) = unframe(bytes, CHECKPOINT_MAGIC)?;
    let header: CheckpointHeader =
        serde_json::from_slice(header).map_err(|e| PersistError::Header(e.to_string()))?;
    let mut expected = 0u64;
    let mut seen = std::collections::HashSet::new();
    for e in &header.tensors {
        if !seen.insert(e.name.as_str()) {
            return Err(PersistError::Header(format!("duplicate tensor {}", e.name)));
        }
        if e.dtype != "f32" {
            return Err(PersistError::BadTensor {
                name: e.name.clone(),
                reason: format!("unsupported dtype {}", e.dtype),
            });
        }
        let numel = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .filter(|&n| n > 0 && e.shape.iter().all(|&d| d > 0));
        if numel.and_then(|n| n.checked_mul(4)) != Some(e.length) {
            return Err(PersistError::BadTensor {
                name: e.name.clone(),
                reason: format!("shape {:?} does not match {} bytes", e.shape, e.length),
            });
        }
        if e.offset != expected {
            return Err(PersistError::OverlappingOffsets {
                name: e.name.clone(),
                offset: e.offset,
                expected,
            });
        }
        expected = expected
            .checked_add(e.length)
            .ok_or_else(|| PersistError::Header("tensor lengths overflow".into()))?;
    }
    if expected > payload.len() as u64 {
        return Err(PersistError::Truncated {
            needed: bytes.len() as u64 - payload.len() as u64 + expected,
            available: bytes.len() as u64,
        });
    }
    if expected != payload.len() as u64 {
        return Err(PersistError::PayloadLength {
            expected,
            actual: payload.len() as u64,
        });
    }
    Ok((header, payload))
}

/// Names of tensors whose bytes no longer match their recorded checksum.
pub fn verify_checksums(bytes: &[u8]) -> PResult<Vec<String>> {
    let (header, payload) = read_checkpoint_header(bytes)?;
    Ok(header
        .tensors
        .iter()
        .filter(|e| {
            let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
            sha256_hex(raw) != e.sha256
        })
        .map(|e| e.name.clone())
        .collect())
}

pub fn save_checkpoint(
    weights: &ModelWeights,
    config: &ModelConfig,
    path: impl AsRef<Path>,
) -> PResult<()> {
    Checkpoint::model(config.clone(), weights.clone()).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> PResult<(ModelWeights, ModelConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let config = ckpt
        .config
        .ok_or_else(|| PersistError::Header("checkpoint carries no model config".into()))?;
    Ok((ckpt.weights, config))
}

/// Writes through a temporary file in the destination directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> PResult<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| PersistError::Io(e.error))?;
    Ok(())
}

/// Per-tensor L2 distance between two weight sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffReport {
    /// `(name, ‖a − b‖₂)` in directory order.
    pub norms: Vec<(String, f64)>,
    /// Tensors whose bits are identical.
    pub identical: Vec<String>,
}

/// `sqrt(Σ (b − a)²)` accumulated in double precision, in buffer order.
pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(y) - f64::from(x);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

impl DiffReport {
    pub fn norm(&self, name: &str) -> Option<f64> {
        self.norms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Two-column table in the style `Model | L2 Norm`, one row per tensor.
    pub fn render_table(&self, label: &str) -> String {
        let mut out = String::from("Model\tTensor\tL2 Norm\n");
        for (name, norm) in &self.norms {
            out.push_str(&format!("{label}\t{name}\t{norm:.2}\n"));
        }
        out
    }
}

pub fn diff_checkpoints(a: &ModelWeights, b: &ModelWeights) -> Result<DiffReport, crate::Error> {
    let missing: Vec<&str> = a.names().filter(|n| b.get(n).is_none()).collect();
    let extra: Vec<&str> = b.names().filter(|n| a.get(n).is_none()).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(crate::Error::ConfigMismatch(format!(
            "tensor directories differ: missing {missing:?}, extra {extra:?}"
        )));
    }
    let mut norms = Vec::with_capacity(a.len());
    let mut identical = Vec::new();
    for (name, ta) in a.iter() {
        let tb = b.get(name).expect("checked above");
        if ta.shape() != tb.shape() {
            return Err(crate::Error::ConfigMismatch(format!(
                "{name}: shape {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        if ta
            .data()
            .iter()
            .map(|v| v.to_bits())
            .eq(tb.data().iter().map(|v| v.to_bits()))
        {
            identical.push(name.to_string());
        }
        norms.push((name.to_string(), l2_distance(ta.data(), tb.data())));
    }
    Ok(DiffReport { norms, identical })
}

/// Where a dataset's records came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Hybrid-sampled from a teacher model.
    Synthetic { n_greedy: usize, temperature: f64 },
    /// A named split of the procedural corpus.
    Corpus { split: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub count: u64,
    pub max_len: u32,
    pub vocab_size: u32,
    pub seed: u64,
    pub generator_fingerprint: Option<String>,
    pub source: DataSource,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<Vec<u32>>,
}

impl Dataset {
    /// Builds a dataset, filling `count` and `max_len` from the records.
    pub fn new(
        records: Vec<Vec<u32>>,
        vocab_size: usize,
        seed: u64,
        generator_fingerprint: Option<String>,
        source: DataSource,
    ) -> Self {
        let max_len = records.iter().map(Vec::len).max().unwrap_or(0) as u32;
        Self {
            header: DatasetHeader {
                count: records.len() as u64,
                max_len,
                vocab_size: vocab_size as u32,
                seed,
                generator_fingerprint,
                source,
                metadata: BTreeMap::new(),
            },
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Same header, first `n` records.
    pub fn prefix(&self, n: usize) -> Self {
        let mut out = self.clone();
        out.records.truncate(n);
        out.header.count = out.records.len() as u64;
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let mut body = Vec::new();
        for r in &self.records {
            body.extend_from_slice(&(r.len() as u32).to_le_bytes());
            for t in r {
                body.extend_from_slice(&t.to_le_bytes());
            }
        }
        frame(DATASET_MAGIC, &header, &body)
    }

    pub fn decode(bytes: &[u8]) -> PResult<Self> {
        let (header, mut body) = unframe(bytes, DATASET_MAGIC)?;
        let header: DatasetHeader =
            serde_json::from_slice(header).map_err(|e| PersistError::Header(e.to_string()))?;
        let total = bytes.len() as u64;
        let truncated = |body: &[u8], need: usize| PersistError::Truncated {
            needed: total - body.len() as u64 + need as u64,
            available: total,
        };
        let mut records = Vec::new();
        for index in 0..header.count {
            if body.len() < 4 {
                return Err(truncated(body, 4));
            }
            let len = u32::from_le_bytes(body[..4].try_into().unwrap());
            body = &body[4..];
            if len > header.max_len {
                return Err(PersistError::BadRecord {
                    index,
                    reason: format!("length {len} exceeds max_len {}", header.max_len),
                });
            }
            let need = len as usize * 4;
            if body.len() < need {
                return Err(truncated(body, need));
            }
            let rec: Vec<u32> = body[..need]
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if let Some(t) = rec.iter().find(|&&t| t >= header.vocab_size) {
                return Err(PersistError::BadRecord {
                    index,
                    reason: format!("token {t} outside vocabulary of {}", header.vocab_size),
                });
            }
            records.push(rec);
            body = &body[need..];
        }
        if !body.is_empty() {
            return Err(PersistError::PayloadLength {
                expected: total - body.len() as u64,
                actual: total,
            });
        }
        Ok(Self { header, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> PResult<()> {
        write_atomic(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> PResult<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.encode())
    }
}
