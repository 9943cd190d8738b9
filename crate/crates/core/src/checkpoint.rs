//! Checkpoint file format.
//!
//! Layout: the ASCII line `UNIGEN-CKPT v1\n`; a u32 LE byte length followed
//! by the canonical config text; a u32 LE entry count; then one entry per
//! parameter tensor, sorted by name: u32 LE name length, the UTF-8 name,
//! u32 LE rows, u32 LE cols, and rows·cols little-endian f64 values in
//! row-major order. No padding anywhere, so equal states produce
//! byte-identical files and a load/save round trip is exact.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::TensorError;
use crate::{Params, Tensor};

type Result<T> = std::result::Result<T, TensorError>;

const MAGIC_LINE: &str = "UNIGEN-CKPT v1\n";

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

/// Serializes a config + parameter set to the documented byte layout.
pub fn checkpoint_bytes(cfg: &Config, params: &Params) -> Vec<u8> {
    let cfg_text = cfg.serialize();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC_LINE.as_bytes());
    buf.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg_text.as_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    // Params iterates its map in name order, which fixes the entry order.
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save_checkpoint(path: &Path, cfg: &Config, params: &Params) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(cfg, params))
        .map_err(|e| TensorError::io("checkpoint write", path.display().to_string(), e))
}

/// Parses a checkpoint. The embedded config text must round-trip through the
/// canonical serializer — a mismatch means the file was edited by hand or
/// written by something else, and is rejected with both hashes so the caller
/// can see which setup each side describes.
pub fn checkpoint_from_bytes(bytes: &[u8], origin: &str) -> Result<(Config, Params)> {
    const OP: &str = "checkpoint read";
    let fail = |msg: String| TensorError::invalid(OP, format!("{origin}: {msg}"));

    let magic = MAGIC_LINE.as_bytes();
    if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
        return Err(fail(format!("bad magic, expected {MAGIC_LINE:?}")));
    }
    let mut pos = magic.len();
    let take_u32 = |pos: &mut usize, what: &str| -> Result<u32> {
        let end = *pos + 4;
        if end > bytes.len() {
            return Err(fail(format!("file truncated reading {what}")));
        }
        let v = u32::from_le_bytes(bytes[*pos..end].try_into().unwrap());
        *pos = end;
        Ok(v)
    };

    let cfg_len = take_u32(&mut pos, "config length")? as usize;
    if pos + cfg_len > bytes.len() {
        return Err(fail("file truncated reading config text".into()));
    }
    let cfg_text = std::str::from_utf8(&bytes[pos..pos + cfg_len])
        .map_err(|_| fail("config text is not UTF-8".into()))?
        .to_string();
    pos += cfg_len;
    let cfg = Config::parse(&cfg_text).map_err(|e| fail(format!("embedded config: {e}")))?;
    let canonical = cfg.serialize();
    if canonical != cfg_text {
        return Err(fail(format!(
            "embedded config is not canonical: stored text hashes to {}, its canonical \
             form hashes to {}",
            sha256_hex(cfg_text.as_bytes()),
            sha256_hex(canonical.as_bytes()),
        )));
    }

    let n_entries = take_u32(&mut pos, "entry count")? as usize;
    let mut params = Params::new();
    let mut prev_name: Option<String> = None;
    for i in 0..n_entries {
        let name_len = take_u32(&mut pos, "name length")? as usize;
        if pos + name_len > bytes.len() {
            return Err(fail(format!("file truncated reading name of entry {i}")));
        }
        let name = std::str::from_utf8(&bytes[pos..pos + name_len])
            .map_err(|_| fail(format!("entry {i}: name is not UTF-8")))?
            .to_string();
        pos += name_len;
        if let Some(prev) = &prev_name {
            if *prev >= name {
                return Err(fail(format!(
                    "entries out of order: {prev:?} then {name:?} (must be sorted, unique)"
                )));
            }
        }
        let rows = take_u32(&mut pos, "rows")? as usize;
        let cols = take_u32(&mut pos, "cols")? as usize;
        let n = rows * cols;
        if pos + 8 * n > bytes.len() {
            return Err(fail(format!("file truncated reading data of {name:?}")));
        }
        let data: Vec<f64> = bytes[pos..pos + 8 * n]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        pos += 8 * n;
        params.insert(&name, Tensor::from_vec(rows, cols, data));
        prev_name = Some(name);
    }
    if pos != bytes.len() {
        return Err(fail(format!(
            "{} trailing bytes after the last entry",
            bytes.len() - pos
        )));
    }
    Ok((cfg, params))
}

pub fn load_checkpoint(path: &Path) -> Result<(Config, Params)> {
    let bytes = std::fs::read(path)
        .map_err(|e| TensorError::io("checkpoint read", path.display().to_string(), e))?;
    checkpoint_from_bytes(&bytes, &path.display().to_string())
}

// ==== tests ====
