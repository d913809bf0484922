//! Binary parameter dumps.
//!
//! ```text
//! magic    8 bytes "BSSMCKPT"
//! version  u32
//! header   u32 length + JSON [`CheckpointHeader`]
//! values   f64 little-endian, tensors in header order
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::ssm::{Architecture, ModelDims, ModelParams};

const MAGIC: &[u8; 8] = b"BSSMCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: Architecture,
    pub dims: ModelDims,
    pub config_hash: String,
    pub iteration: usize,
    pub seed: u64,
    pub diverged: bool,
    pub tensors: Vec<(String, Vec<usize>)>,
}

/// Writes `params` to `path` and the header alone to `path` + `.json`.
pub fn write_checkpoint(
    path: &Path,
    params: &ModelParams,
    config_hash: &str,
    iteration: usize,
    seed: u64,
    diverged: bool,
) -> Result<CheckpointHeader> {
    let named = params.named();
    let header = CheckpointHeader {
        arch: params.arch,
        dims: params.dims,
        config_hash: config_hash.to_string(),
        iteration,
        seed,
        diverged,
        tensors: named.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in &named {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    let mut manifest = path.as_os_str().to_owned();
    manifest.push(".json");
    fs::write(manifest, serde_json::to_string_pretty(&header)?)?;
    Ok(header)
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, ModelParams)> {
    let bytes = fs::read(path)?;
    let bad = |what: &str| Error::Format(format!("{}: {what}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = 16 + hlen;
    if bytes.len() < body {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body])?;
    let mut params = ModelParams::zeros(header.arch, header.dims)?;
    let mut offset = body;
    {
        let mut named = params.named_mut();
        if named.len() != header.tensors.len() {
            return Err(bad("tensor count does not match architecture"));
        }
        for ((name, t), (hname, hshape)) in named.iter_mut().zip(&header.tensors) {
            if *name != hname || t.shape() != hshape.as_slice() {
                return Err(bad(&format!("unexpected tensor {hname}")));
            }
            let n = t.len();
            let end = offset + 8 * n;
            if bytes.len() < end {
                return Err(bad("truncated values"));
            }
            let vals = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            **t = Tensor::new(hshape, vals)?;
            offset = end;
        }
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((header, params))
}
