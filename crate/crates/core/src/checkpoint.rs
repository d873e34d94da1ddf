//! Checkpoint file format.
//!
//! ```text
//! b"CMCKPT01" | u64 LE manifest length | JSON manifest | f32 LE payload
//! ```
//!
//! The manifest holds the model config and every tensor's name, dtype and
//! shape in payload order. Parameters are stored as f32; values initialized
//! by [`ModelParams::init`] are f32-exact and so round-trip bitwise.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 8] = b"CMCKPT01";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn manifest(cfg: &ModelConfig, params: &ModelParams) -> Manifest {
    Manifest {
        config: cfg.clone(),
        tensors: params
            .tensors()
            .into_iter()
            .map(|(meta, _)| TensorEntry {
                name: meta.name,
                dtype: "f32".into(),
                shape: meta.shape,
            })
            .collect(),
    }
}

pub fn encode(cfg: &ModelConfig, params: &ModelParams) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&manifest(cfg, params)).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header.len() + 4 * params.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, data) in params.tensors() {
        for &v in data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn ckpt_err<T>(tensor: &str, reason: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint {
        tensor: tensor.to_string(),
        reason: reason.into(),
    })
}

pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, ModelParams)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| Error::Format("manifest extends past end of file".into()))?;
    let man: Manifest = serde_json::from_slice(header).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    man.config.validate()?;
    let mut params = ModelParams::init(&man.config, 0);
    let expected = manifest(&man.config, &params).tensors;
    if let Some(extra) = man.tensors.get(expected.len()) {
        return ckpt_err(&extra.name, "unexpected tensor for this config");
    }
    for (want, got) in expected
        .iter()
        .zip(man.tensors.iter().map(Some).chain(std::iter::repeat(None)))
    {
        let Some(got) = got else {
            return ckpt_err(&want.name, "missing from manifest");
        };
        if got.name != want.name {
            return ckpt_err(&want.name, format!("manifest has `{}` in its place", got.name));
        }
        if got.shape != want.shape {
            return ckpt_err(&want.name, format!("shape {:?}, expected {:?}", got.shape, want.shape));
        }
        if got.dtype != "f32" {
            return ckpt_err(&want.name, format!("unsupported dtype `{}`", got.dtype));
        }
    }
    let mut payload = &bytes[16 + hlen..];
    for (meta, data) in params.tensors_mut() {
        let need = 4 * data.len();
        if payload.len() < need {
            return ckpt_err(
                &meta.name,
                format!("truncated payload: {need} bytes needed, {} left", payload.len()),
            );
        }
        for (dst, chunk) in data.iter_mut().zip(payload[..need].chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
        payload = &payload[need..];
    }
    if !payload.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after payload", payload.len())));
    }
    Ok((man.config, params))
}

/// Writes atomically: a failed save leaves no file at `path`.
pub fn save_checkpoint(cfg: &ModelConfig, params: &ModelParams, path: &Path) -> Result<()> {
    write_atomic(path, &encode(cfg, params)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    decode(&std::fs::read(path)?)
}

/// Writes through a temporary file in the target directory and renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
