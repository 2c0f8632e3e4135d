//! Binary checkpoint container.
//!
//! Layout (little-endian): 4-byte magic, u32 version, u32 entry count,
//! then a manifest of (name, shape) entries, then the raw fp32 tensor
//! data in manifest order. The pretraining encoder uses magic "SMAE";
//! full model checkpoints use magic "FSWM".

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Param;
use crate::error::TrainError;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC_SMAE: [u8; 4] = *b"SMAE";
pub const MAGIC_MODEL: [u8; 4] = *b"FSWM";
pub const VERSION: u32 = 1;

pub fn save_params<E: Scalar>(
    path: &Path,
    magic: [u8; 4],
    params: &[&Param<E>],
) -> Result<(), TrainError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&magic)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
    }
    for p in params {
        for &v in p.value.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, TrainError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Parsed manifest entry.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Read a checkpoint into (manifest, tensors). Rejects wrong magic.
pub fn load_raw(
    path: &Path,
    magic: [u8; 4],
) -> Result<Vec<(ManifestEntry, Tensor<f64>)>, TrainError> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut got = [0u8; 4];
    r.read_exact(&mut got)?;
    if got != magic {
        return Err(TrainError::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            got, magic
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(TrainError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| TrainError::Checkpoint("non-UTF8 parameter name".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        entries.push(ManifestEntry { name, shape });
    }
    let mut out = Vec::with_capacity(count);
    for e in entries {
        let n: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        let t = Tensor::from_vec(&e.shape, data);
        out.push((e, t));
    }
    Ok(out)
}

/// Load a checkpoint into an existing parameter set. Every manifest entry
/// must match a parameter by name and shape, and every parameter must be
/// covered.
pub fn load_params<E: Scalar>(
    path: &Path,
    magic: [u8; 4],
    params: &mut [&mut Param<E>],
) -> Result<(), TrainError> {
    let loaded = load_raw(path, magic)?;
    let mut by_name: std::collections::BTreeMap<String, Tensor<f64>> = loaded
        .into_iter()
        .map(|(e, t)| (e.name, t))
        .collect();
    for p in params.iter_mut() {
        let Some(t) = by_name.remove(&p.name) else {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint missing parameter `{}`",
                p.name
            )));
        };
        if t.shape() != p.value.shape() {
            return Err(TrainError::Checkpoint(format!(
                "parameter `{}`: checkpoint shape {:?} vs model {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = Tensor::from_vec(
            t.shape(),
            t.data().iter().map(|&v| E::from_f64(v)).collect(),
        );
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(TrainError::Checkpoint(format!(
            "checkpoint has unknown parameter `{extra}`"
        )));
    }
    Ok(())
}
