//! Self-describing checkpoint archive.
//!
//! Layout: 4-byte magic `ICSG`, u32 format version, u64 header length, a
//! JSON header (architecture config, training metadata, and a tensor
//! manifest), then the raw little-endian `f32` payload in manifest order.
//! Reloading restores every parameter bit, so a reloaded model's forward
//! outputs are identical to the original's.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ModelParams;
use super::Model;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ICSG";
const VERSION: u32 = 1;

/// Which objective produced the weights; evaluators need to know how to
/// arrange inputs for the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Canvas inpainting with in-context support (the main pipeline).
    CanvasInpainting,
    /// Direct image-to-mask regression without context (the baseline).
    QueryOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Last completed training epoch (0 for a freshly initialized model).
    pub epoch: usize,
    pub base_seed: u64,
    pub objective: Objective,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

/// Writes atomically: the archive lands under a temporary name in the target
/// directory and is renamed into place, so a crash never leaves a truncated
/// checkpoint at `path`.
pub fn save_checkpoint(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    let tensors = model.params.tensors();
    let header = Header {
        config: model.cfg,
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|t| TensorEntry { name: t.name.clone(), len: t.data.len() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;

    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&header_bytes).map_err(io)?;
        let mut buf = Vec::with_capacity(1 << 16);
        for t in &tensors {
            buf.clear();
            for &v in t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}, not a checkpoint archive")));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(|e| Error::io(path, e))?;
    let header_len = u64::from_le_bytes(u64buf) as usize;
    if header_len > 1 << 24 {
        return Err(bad(format!("implausible header length {header_len}")));
    }
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(|e| Error::io(path, e))?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::json(path, e))?;
    header.config.validate()?;

    let mut params = ModelParams::zeros(&header.config);
    {
        let mut tensors = params.tensors_mut();
        if tensors.len() != header.tensors.len() {
            return Err(bad(format!(
                "tensor manifest has {} entries, architecture needs {}",
                header.tensors.len(),
                tensors.len()
            )));
        }
        for (slot, entry) in tensors.iter_mut().zip(header.tensors.iter()) {
            if slot.name != entry.name || slot.data.len() != entry.len {
                return Err(bad(format!(
                    "tensor {} (len {}) does not match expected {} (len {})",
                    entry.name,
                    entry.len,
                    slot.name,
                    slot.data.len()
                )));
            }
            let mut bytes = vec![0u8; entry.len * 4];
            r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
            for (v, c) in slot.data.iter_mut().zip(bytes.chunks_exact(4)) {
                *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(bad("trailing bytes after payload".into()));
    }
    Ok((Model { cfg: header.config, params }, header.meta))
}
