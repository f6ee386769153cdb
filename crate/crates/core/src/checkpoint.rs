//! Weight checkpoint files.
//!
//! Little-endian binary layout, identical for every module:
//!
//! ```text
//! magic    4 bytes  "GVCK"
//! version  u32      1
//! count    u32      number of parameters
//! table    per parameter, sorted by name:
//!            name_len u32, name bytes (UTF-8),
//!            ndim u32, dims u64 each,
//!            offset u64 (elements into the data section), len u64
//! data     f32 LE parameter values, concatenated in table order
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::numerics::Scalar;
use crate::params::Parameters;

pub const MAGIC: &[u8; 4] = b"GVCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint file (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported version {version}")]
    BadVersion { path: PathBuf, version: u32 },
    #[error("checkpoint is missing parameter '{name}'")]
    MissingParam { name: String },
    #[error("parameter '{name}' has shape {file:?} in the file but {model:?} in the model")]
    ShapeMismatch {
        name: String,
        file: Vec<usize>,
        model: Vec<usize>,
    },
    #[error("checkpoint holds {file} parameters, model expects {model}")]
    CountMismatch { file: usize, model: usize },
    #[error("{path}: corrupt name table: {msg}")]
    Corrupt { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

/// Writes every parameter of `model` to `path`.
pub fn save<T: Scalar, M: Parameters<T>>(model: &M, path: &Path) -> Result<(), CheckpointError> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    model.visit(&mut |name, t| {
        let values = t.data().iter().map(|v| v.to_f64() as f32).collect();
        entries.push((name.to_string(), t.shape().to_vec(), values));
    });
    entries.sort_by(|a, b| a.0.cmp(&b.0));

    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(io_err(path))?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err(path))?;
    w.write_all(&(entries.len() as u32).to_le_bytes())
        .map_err(io_err(path))?;
    let mut offset = 0u64;
    for (name, shape, values) in &entries {
        w.write_all(&(name.len() as u32).to_le_bytes())
            .map_err(io_err(path))?;
        w.write_all(name.as_bytes()).map_err(io_err(path))?;
        w.write_all(&(shape.len() as u32).to_le_bytes())
            .map_err(io_err(path))?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err(path))?;
        }
        w.write_all(&offset.to_le_bytes()).map_err(io_err(path))?;
        w.write_all(&(values.len() as u64).to_le_bytes())
            .map_err(io_err(path))?;
        offset += values.len() as u64;
    }
    for (_, _, values) in &entries {
        for v in values {
            w.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(io_err(path))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(io_err(path))?;
    Ok(u64::from_le_bytes(buf))
}

/// Loads a checkpoint into `model`. Every model parameter must be
/// present with a matching shape, and the file must not carry extras.
pub fn load<T: Scalar, M: Parameters<T>>(model: &mut M, path: &Path) -> Result<(), CheckpointError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let count = read_u32(&mut r, path)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        if name_len > 4096 {
            return Err(CheckpointError::Corrupt {
                path: path.to_path_buf(),
                msg: format!("implausible name length {name_len}"),
            });
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io_err(path))?;
        let name = String::from_utf8(name_bytes).map_err(|e| CheckpointError::Corrupt {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let ndim = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r, path)? as usize);
        }
        let offset = read_u64(&mut r, path)?;
        let len = read_u64(&mut r, path)?;
        if shape.iter().product::<usize>() as u64 != len {
            return Err(CheckpointError::Corrupt {
                path: path.to_path_buf(),
                msg: format!("shape {shape:?} disagrees with element count {len}"),
            });
        }
        entries.push(Entry {
            name,
            shape,
            offset,
            len,
        });
    }

    let total: u64 = entries.iter().map(|e| e.len).sum();
    let mut raw = vec![0u8; total as usize * 4];
    r.read_exact(&mut raw).map_err(io_err(path))?;
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let mut by_name: std::collections::HashMap<&str, &Entry> =
        entries.iter().map(|e| (e.name.as_str(), e)).collect();

    let mut model_count = 0usize;
    let mut failure: Option<CheckpointError> = None;
    model.visit_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        model_count += 1;
        let Some(entry) = by_name.remove(name) else {
            failure = Some(CheckpointError::MissingParam {
                name: name.to_string(),
            });
            return;
        };
        if entry.shape != t.shape() {
            failure = Some(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                file: entry.shape.clone(),
                model: t.shape().to_vec(),
            });
            return;
        }
        let start = entry.offset as usize;
        let end = start + entry.len as usize;
        let slice = &values[start..end];
        let data = t.data_mut();
        for (dst, &src) in data.iter_mut().zip(slice) {
            *dst = T::from_f64(src as f64);
        }
    });
    if let Some(err) = failure {
        return Err(err);
    }
    if !by_name.is_empty() {
        return Err(CheckpointError::CountMismatch {
            file: count,
            model: model_count,
        });
    }
    Ok(())
}
