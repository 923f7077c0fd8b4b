//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BGID" | u32 version | u32 meta_len | meta JSON | u32 meta_crc | u32 tensors
//! per tensor: u16 name_len | name | u8 rank | u32 dims[rank] | u32 crc | f32 payload
//! ```
//!
//! Weights are stored as `f32`; call [`ModelParams::round_to_f32`] before
//! evaluating if predictions must match a reloaded model exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build, ModelParams, VariantSpec};
use crate::data::{FeatureEncoder, LabelCodec, MinMaxScaler};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BGID";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything besides the weights needed to score new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: VariantSpec,
    pub codec: Option<LabelCodec>,
    #[serde(default)]
    pub encoder: Option<FeatureEncoder>,
    #[serde(default)]
    pub scaler: Option<MinMaxScaler>,
    /// Training configuration as it was run.
    #[serde(default)]
    pub train_config: serde_json::Value,
    /// Hex CRC-32 of the serialized training configuration.
    #[serde(default)]
    pub config_digest: String,
}

impl CheckpointMeta {
    pub fn new(spec: VariantSpec) -> Self {
        Self {
            spec,
            codec: None,
            encoder: None,
            scaler: None,
            train_config: serde_json::Value::Null,
            config_digest: String::new(),
        }
    }

    /// Stores `config` and its digest.
    pub fn with_train_config<T: Serialize>(mut self, config: &T) -> Result<Self> {
        let text = serde_json::to_string(config)?;
        self.config_digest = format!("{:08x}", crc32fast::hash(text.as_bytes()));
        self.train_config = serde_json::from_str(&text)?;
        Ok(self)
    }
}

pub fn encode(params: &ModelParams, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * params.total());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta_json = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&crc32fast::hash(&meta_json).to_le_bytes());
    let named = params.named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let payload: Vec<u8> = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CheckpointTruncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ModelParams, CheckpointMeta)> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointFormat(if bytes.is_empty() {
            "file is empty".into()
        } else {
            "missing BGID magic".into()
        }));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta_json = r.take(meta_len, "metadata")?;
    if r.u32("metadata checksum")? != crc32fast::hash(meta_json) {
        return Err(Error::CheckpointChecksum("metadata".into()));
    }
    let meta: CheckpointMeta = serde_json::from_slice(meta_json)
        .map_err(|e| Error::CheckpointFormat(format!("metadata is not valid: {e}")))?;

    let mut params = build(&meta.spec, &mut RngStream::new(0))?;
    let expected: Vec<(String, Vec<usize>)> =
        params.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(Error::CheckpointFormat(format!(
            "{count} tensors stored, spec needs {}",
            expected.len()
        )));
    }
    let mut slots = params.tensors_mut();
    for (i, (want_name, want_shape)) in expected.iter().enumerate() {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::CheckpointFormat("tensor name is not UTF-8".into()))?;
        if name != want_name {
            return Err(Error::CheckpointFormat(format!("expected tensor '{want_name}', found '{name}'")));
        }
        let rank = r.u8(name)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(name)? as usize);
        }
        if &shape != want_shape {
            return Err(Error::CheckpointFormat(format!(
                "tensor '{name}' has shape {shape:?}, spec needs {want_shape:?}"
            )));
        }
        let crc = r.u32(name)?;
        let n: usize = shape.iter().product();
        let payload = r.take(4 * n, name)?;
        if crc32fast::hash(payload) != crc {
            return Err(Error::CheckpointChecksum(format!("tensor '{name}'")));
        }
        for (dst, chunk) in slots[i].data_mut().iter_mut().zip(payload.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::CheckpointFormat(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok((params, meta))
}

pub fn save(params: &ModelParams, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = encode(params, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
