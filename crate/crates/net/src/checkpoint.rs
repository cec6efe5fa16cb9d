//! Checkpoint files: magic, format version, a JSON header (network config,
//! step counter, tensor table) and the tensors as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, NetError, Result};
use crate::model::{Network, NetworkConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EMBRYCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub network: NetworkConfig,
    pub step: usize,
    /// Free-form training metadata (e.g. the training config).
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn collect(net: &mut Network) -> (Vec<TensorEntry>, Vec<f64>) {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    net.visit_params(&mut |p| {
        entries.push(TensorEntry {
            name: p.name.clone(),
            kind: TensorKind::Param,
            len: p.value.len(),
        });
        payload.extend_from_slice(&p.value);
    });
    net.visit_buffers(&mut |b| {
        entries.push(TensorEntry {
            name: b.name.clone(),
            kind: TensorKind::Buffer,
            len: b.value.len(),
        });
        payload.extend_from_slice(&b.value);
    });
    (entries, payload)
}

pub fn encode_checkpoint(net: &mut Network, step: usize, meta: serde_json::Value) -> Result<Vec<u8>> {
    let (tensors, payload) = collect(net);
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        network: net.config().clone(),
        step,
        meta,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a checkpoint and rebuilds the network it describes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Network, CheckpointHeader)> {
    let bad = |m: &str| NetError::Checkpoint(m.to_owned());
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(NetError::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
    let payload = &body[hlen..];
    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    if payload.len() != 8 * total {
        return Err(NetError::Checkpoint(format!(
            "payload holds {} bytes, tensor table needs {}",
            payload.len(),
            8 * total
        )));
    }
    let mut net = Network::build(&header.network, 0)?;
    let (expected, _) = collect(&mut net);
    if expected != header.tensors {
        return Err(NetError::Incompatible("tensor table does not match the network config".into()));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    net.visit_params(&mut |p| p.value.iter_mut().for_each(|v| *v = values.next().unwrap()));
    net.visit_buffers(&mut |b| b.value.iter_mut().for_each(|v| *v = values.next().unwrap()));
    Ok((net, header))
}

pub fn save_checkpoint(path: &Path, net: &mut Network, step: usize, meta: serde_json::Value) -> Result<()> {
    let bytes = encode_checkpoint(net, step, meta)?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and checks it was trained with `expected`.
pub fn load_compatible(path: &Path, expected: &NetworkConfig) -> Result<(Network, CheckpointHeader)> {
    let (net, header) = load_checkpoint(path)?;
    if &header.network != expected {
        return Err(NetError::Incompatible(format!(
            "checkpoint was trained with the {} profile ({:?}), requested {} ({:?})",
            header.network.profile, header.network, expected.profile, expected
        )));
    }
    Ok((net, header))
}
