//! Parameter files: a flat sequence of named tensors followed to EOF, each
//! stored as `u32` name length, UTF-8 name, `u32` rank, `u64` extents and
//! little-endian `f64` values. The producing config sits next to it as JSON.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

use super::{AdFormer, ModelConfig};

/// Appended to the checkpoint path for the config manifest.
pub const CONFIG_SUFFIX: &str = ".config.json";

pub fn write_tensors<T: Scalar, W: Write>(out: &mut W, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            out.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize, path: &str) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|&e| e <= buf.len()).ok_or_else(|| Error::Format {
        path: path.to_string(),
        reason: format!("truncated at byte {pos}"),
    })?;
    let s = &buf[*pos..end];
    *pos = end;
    Ok(s)
}

/// Parses every tensor in `bytes`; `path` only labels errors.
pub fn read_tensors<T: Scalar>(bytes: &[u8], path: &str) -> Result<Vec<(String, Tensor<T>)>> {
    let mut pos = 0;
    let mut out = Vec::new();
    let u32_at = |pos: &mut usize| -> Result<usize> {
        Ok(u32::from_le_bytes(take(bytes, pos, 4, path)?.try_into().expect("4 bytes")) as usize)
    };
    while pos < bytes.len() {
        let len = u32_at(&mut pos)?;
        let name = std::str::from_utf8(take(bytes, &mut pos, len, path)?)
            .map_err(|e| Error::Format {
                path: path.to_string(),
                reason: format!("tensor name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = u32_at(&mut pos)?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            let e = u64::from_le_bytes(take(bytes, &mut pos, 8, path)?.try_into().expect("8 bytes"));
            shape.push(usize::try_from(e).map_err(|_| Error::Format {
                path: path.to_string(),
                reason: format!("extent {e} of {name} overflows"),
            })?);
        }
        let count = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| Error::Format {
            path: path.to_string(),
            reason: format!("shape {shape:?} of {name} overflows"),
        })?;
        let raw = take(bytes, &mut pos, count.saturating_mul(8), path)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

fn config_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(CONFIG_SUFFIX);
    PathBuf::from(s)
}

/// Writes the model parameters to `path` and its config to
/// `path` + [`CONFIG_SUFFIX`].
pub fn save_checkpoint<T: Scalar>(model: &AdFormer<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    let named: Vec<(&str, &Tensor<T>)> = model.store.iter().map(|p| (p.name.as_str(), &p.value)).collect();
    write_tensors(&mut buf, &named)?;
    fs::write(path, buf)?;
    let cfg = serde_json::to_string_pretty(&model.config).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(config_path(path), cfg + "\n")?;
    Ok(())
}

/// Rebuilds a model from a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<AdFormer<T>> {
    let cpath = config_path(path);
    let text = fs::read_to_string(&cpath)?;
    let config: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: cpath.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let tensors = read_tensors(&bytes, &path.display().to_string())?;
    let mut model = AdFormer::new(config, 0)?;
    model.store.load_named(tensors)?;
    Ok(model)
}
