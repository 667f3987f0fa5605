//! Checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, `u64` payload
//! length, payload, SHA-256 of the payload. The payload is a length-prefixed
//! JSON header (step, vocabulary, architecture, segments) followed by raw
//! little-endian `f64` parameters, first moments and second moments.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Layout, OptimizerState, ParamVector, Segment};
use crate::policy::{PolicyArchitecture, Vocabulary};

pub const MAGIC: &[u8; 8] = b"SOUPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub vocab: Vocabulary,
    pub arch: PolicyArchitecture,
    pub params: ParamVector,
    pub optimizer: OptimizerState,
}

#[derive(Serialize, Deserialize)]
struct SegmentHeader {
    name: String,
    offset: usize,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: u64,
    optimizer_steps: u64,
    vocab_symbols: Vec<String>,
    bos: usize,
    eos: usize,
    pad: usize,
    sep: usize,
    arch: PolicyArchitecture,
    segments: Vec<SegmentHeader>,
    len: usize,
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CheckpointCorrupt(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| corrupt("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let layout = self.params.layout();
        let n = self.params.len();
        if self.optimizer.first_moment.len() != n || self.optimizer.second_moment.len() != n {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        let header = Header {
            step: self.step,
            optimizer_steps: self.optimizer.step_count,
            vocab_symbols: self.vocab.symbols().to_vec(),
            bos: self.vocab.bos,
            eos: self.vocab.eos,
            pad: self.vocab.pad,
            sep: self.vocab.sep,
            arch: self.arch,
            segments: layout
                .segments()
                .iter()
                .map(|s| SegmentHeader {
                    name: s.name.clone(),
                    offset: s.offset,
                    shape: s.shape.clone(),
                })
                .collect(),
            len: n,
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut payload = Vec::with_capacity(8 + header_json.len() + 24 * n);
        payload.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        payload.extend_from_slice(&header_json);
        push_f64s(&mut payload, self.params.values());
        push_f64s(&mut payload, &self.optimizer.first_moment);
        push_f64s(&mut payload, &self.optimizer.second_moment);

        let mut out = Vec::with_capacity(payload.len() + 52);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&Sha256::digest(&payload));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing checkpoint magic header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let mut r = Reader { buf: bytes, pos: 12 };
        let payload_len = usize::try_from(r.u64()?).map_err(|_| corrupt("payload too large"))?;
        let payload = r.take(payload_len)?;
        let digest = r.take(32)?;
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes after checksum"));
        }
        if Sha256::digest(payload).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }

        let mut p = Reader { buf: payload, pos: 0 };
        let header_len = usize::try_from(p.u64()?).map_err(|_| corrupt("header too large"))?;
        let header: Header = serde_json::from_slice(p.take(header_len)?)
            .map_err(|e| corrupt(format!("header: {e}")))?;
        let vocab = Vocabulary::new(header.vocab_symbols, header.bos, header.eos, header.pad, header.sep)
            .map_err(|e| corrupt(format!("vocabulary: {e}")))?;
        let segments = header
            .segments
            .into_iter()
            .map(|s| Segment {
                name: s.name,
                offset: s.offset,
                shape: s.shape,
            })
            .collect();
        let layout = Layout::from_segments(segments).map_err(|e| corrupt(format!("layout: {e}")))?;
        if layout.total_len() != header.len {
            return Err(corrupt("segment sizes do not cover the stored values"));
        }
        let values = p.f64s(header.len)?;
        let first_moment = p.f64s(header.len)?;
        let second_moment = p.f64s(header.len)?;
        if p.pos != payload.len() {
            return Err(corrupt("payload has unexpected trailing bytes"));
        }
        let params = ParamVector::from_values(Arc::new(layout), values)
            .map_err(|e| corrupt(format!("parameters: {e}")))?;
        header.arch.check_params(&params).map_err(|e| corrupt(e.to_string()))?;
        Ok(Checkpoint {
            step: header.step,
            vocab,
            arch: header.arch,
            params,
            optimizer: OptimizerState {
                step_count: header.optimizer_steps,
                first_moment,
                second_moment,
            },
        })
    }
}

/// Writes via a temporary file in the same directory, then renames.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::CheckpointCorrupt(msg) => Error::CheckpointCorrupt(format!("{}: {msg}", path.display())),
        other => other,
    })
}
