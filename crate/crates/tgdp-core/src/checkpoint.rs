//! Versioned binary checkpoints for networks.
//!
//! Layout: 12-byte magic "TGDP-CKPT-v1", u32 LE metadata length, JSON metadata
//! (architecture, activations, embedding config, label classes, kind tag),
//! u64 LE parameter count, then the flat f64 LE parameter vector.

use crate::embed::TimeEmbedding;
use crate::error::{Result, TgdpError};
use crate::net::{Activation, DenseNetwork};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 12] = b"TGDP-CKPT-v1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetMetadata {
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    pub embedding: Option<TimeEmbedding>,
    pub num_classes: usize,
    /// Role tag ("score", "classifier", "guidance", ...), free-form.
    pub kind: String,
}

pub fn save_checkpoint(path: &Path, net: &DenseNetwork, meta: &NetMetadata) -> Result<()> {
    assert_eq!(meta.layer_sizes, net.layer_sizes(), "metadata disagrees with network");
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    let meta_json = serde_json::to_vec(meta).map_err(|e| TgdpError::format(e.to_string()))?;
    f.write_all(&(meta_json.len() as u32).to_le_bytes())?;
    f.write_all(&meta_json)?;
    f.write_all(&(net.param_count() as u64).to_le_bytes())?;
    for p in net.params() {
        f.write_all(&p.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(DenseNetwork, NetMetadata)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 12];
    f.read_exact(&mut magic)
        .map_err(|_| TgdpError::format("file too short for header"))?;
    if &magic != MAGIC {
        return Err(TgdpError::format("bad magic; not a checkpoint file"));
    }
    let mut len4 = [0u8; 4];
    f.read_exact(&mut len4).map_err(|_| TgdpError::format("truncated metadata length"))?;
    let meta_len = u32::from_le_bytes(len4) as usize;
    let mut meta_buf = vec![0u8; meta_len];
    f.read_exact(&mut meta_buf).map_err(|_| TgdpError::format("truncated metadata"))?;
    let meta: NetMetadata = serde_json::from_slice(&meta_buf)
        .map_err(|e| TgdpError::format(format!("metadata parse: {e}")))?;
    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8).map_err(|_| TgdpError::format("truncated parameter count"))?;
    let n_params = u64::from_le_bytes(len8) as usize;

    let mut net = DenseNetwork::new(meta.layer_sizes.clone(), meta.activations.clone());
    if net.param_count() != n_params {
        return Err(TgdpError::format(format!(
            "parameter count {} does not match architecture ({} expected)",
            n_params,
            net.param_count()
        )));
    }
    let mut raw = vec![0u8; n_params * 8];
    f.read_exact(&mut raw).map_err(|_| TgdpError::format("truncated parameters"))?;
    let params: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    net.set_params(&params);
    Ok((net, meta))
}
