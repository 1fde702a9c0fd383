//! Binary model container.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "CFXMODEL"
//! 8       4     format version, u32 little-endian
//! 12      4     header length N, u32 little-endian
//! 16      N     UTF-8 JSON header (ModelHeader)
//! 16+N    ...   one blob per parameter buffer, in header order:
//!               u64 LE value count, then that many f64 LE values
//! ```
//!
//! The header lists the layer structure without parameters; blobs are matched
//! to layers in the same pre-order as [`Network::params`](super::Network::params).

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{Layer, LossKind, Network};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 8] = b"CFXMODEL";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    /// Model family, e.g. `bayar_net`.
    pub kind: String,
    /// Fingerprint of the configuration the model was built for.
    pub fingerprint: String,
    #[serde(default)]
    pub layers: Vec<Layer>,
    #[serde(default)]
    pub loss: Option<LossKind>,
    /// Free-form extra fields owned by the model family.
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn write_container<W: Write>(out: &mut W, header: &ModelHeader, params: &[&[f64]]) -> std::io::Result<()> {
    let json = serde_json::to_vec(header).map_err(std::io::Error::other)?;
    let len = u32::try_from(json.len()).map_err(std::io::Error::other)?;
    out.write_all(MODEL_MAGIC)?;
    out.write_all(&MODEL_VERSION.to_le_bytes())?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(&json)?;
    for p in params {
        out.write_all(&(p.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(p.len() * 8);
        for v in *p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse { offset: self.pos, message: format!("truncated {what}") });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Parses a container held in memory.
pub fn read_container(bytes: &[u8]) -> Result<(ModelHeader, Vec<Vec<f64>>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != MODEL_MAGIC {
        return Err(Error::Parse { offset: 0, message: "not a model file (bad magic)".into() });
    }
    let version = u32::from_le_bytes(c.take(4, "version")?.try_into().expect("4 bytes"));
    if version != MODEL_VERSION {
        return Err(Error::Parse { offset: 8, message: format!("unsupported model version {version}") });
    }
    let len = u32::from_le_bytes(c.take(4, "header length")?.try_into().expect("4 bytes")) as usize;
    let start = c.pos;
    let header: ModelHeader = serde_json::from_slice(c.take(len, "header")?)
        .map_err(|e| Error::Parse { offset: start, message: format!("bad header: {e}") })?;
    let mut params = Vec::new();
    while c.pos < bytes.len() {
        let n = u64::from_le_bytes(c.take(8, "blob length")?.try_into().expect("8 bytes"));
        let n = usize::try_from(n)
            .ok()
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::Parse { offset: c.pos - 8, message: "blob length overflows".into() })?;
        let raw = c.take(n * 8, "parameter blob")?;
        params.push(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect());
    }
    Ok((header, params))
}

impl Network {
    /// Reassembles a network from its layer structure and parameter blobs.
    pub fn from_parts(layers: Vec<Layer>, loss: LossKind, params: Vec<Vec<f64>>) -> Result<Network> {
        let mut net = Network::new(layers, loss);
        let lengths = net.param_lengths();
        if lengths.len() != params.len() {
            return Err(Error::invalid(format!(
                "network expects {} parameter buffers, got {}",
                lengths.len(),
                params.len()
            )));
        }
        for (k, (slot, p)) in net.params_mut().into_iter().zip(params).enumerate() {
            if p.len() != lengths[k] {
                return Err(Error::invalid(format!("parameter buffer {k} has {} values, expected {}", p.len(), lengths[k])));
            }
            *slot = p;
        }
        Ok(net)
    }

    /// Header describing this network's structure.
    pub fn header(&self, kind: &str, fingerprint: &str, meta: serde_json::Value) -> ModelHeader {
        ModelHeader {
            kind: kind.to_string(),
            fingerprint: fingerprint.to_string(),
            layers: self.layers.clone(),
            loss: Some(self.loss),
            meta,
        }
    }

    pub fn to_bytes(&self, kind: &str, fingerprint: &str, meta: serde_json::Value) -> Vec<u8> {
        let mut out = Vec::new();
        write_container(&mut out, &self.header(kind, fingerprint, meta), &self.params())
            .expect("writing to a Vec cannot fail");
        out
    }

    /// Inverse of [`Network::to_bytes`]; also returns the header.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Network, ModelHeader)> {
        let (header, params) = read_container(bytes)?;
        let loss = header.loss.ok_or_else(|| Error::invalid("model header has no loss"))?;
        let net = Network::from_parts(header.layers.clone(), loss, params)?;
        Ok((net, header))
    }
}
