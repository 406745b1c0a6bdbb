//! Versioned binary checkpoints: magic, format version, the run
//! configuration as length-prefixed text, every named parameter and buffer
//! as a shape-prefixed little-endian 32-bit array, optimizer moments, and
//! the step counter. Values restore by name into an already-built model,
//! so structural drift surfaces as an error instead of silent misloading.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tensor::Real;

const MAGIC: &[u8; 8] = b"SPIKEWIN";
const VERSION: u32 = 1;

fn w_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_str(w: &mut impl Write, s: &str) -> Result<()> {
    w_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn w_f32s<R: Real>(w: &mut impl Write, xs: &[R]) -> Result<()> {
    for x in xs {
        w.write_all(&(x.to64() as f32).to_le_bytes())?;
    }
    Ok(())
}

fn r_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn r_str(r: &mut impl Read) -> Result<String> {
    let n = r_u32(r)? as usize;
    if n > 1 << 20 {
        return Err(Error::Checkpoint(format!("implausible string length {n}")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Checkpoint(format!("non-utf8 string: {e}")))
}

fn r_f32s<R: Real>(r: &mut impl Read, n: usize) -> Result<Vec<R>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| R::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect())
}

/// Write the store (parameters, buffers, moments, step counter) with the
/// configuration text that built it.
pub fn save<R: Real>(path: &Path, config_text: &str, store: &ParamStore<R>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w_u32(&mut w, VERSION)?;
    w_str(&mut w, config_text)?;

    w_u32(&mut w, store.len() as u32)?;
    for key in store.keys() {
        let t = store.tensor(key);
        w_str(&mut w, store.name(key))?;
        w_u32(&mut w, t.shape().len() as u32)?;
        for &d in t.shape() {
            w_u32(&mut w, d as u32)?;
        }
        w_f32s(&mut w, t.data())?;
    }

    let with_moments: Vec<_> = store
        .keys()
        .filter(|&k| !store.moments(k).0.is_empty())
        .collect();
    w_u32(&mut w, with_moments.len() as u32)?;
    for key in with_moments {
        let (m, v) = store.moments(key);
        w_str(&mut w, store.name(key))?;
        w_u32(&mut w, m.len() as u32)?;
        w_f32s(&mut w, m)?;
        w_f32s(&mut w, v)?;
    }

    w_u64(&mut w, store.step_count())?;
    w.flush()?;
    Ok(())
}

fn check_header(r: &mut impl Read) -> Result<String> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, not a checkpoint file",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = r_u32(r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {VERSION}"
        )));
    }
    r_str(r)
}

/// Read only the embedded configuration text (used to rebuild the model
/// before loading values).
pub fn read_config(path: &Path) -> Result<String> {
    let mut r = BufReader::new(File::open(path)?);
    check_header(&mut r)
}

/// Restore values into an already-built store. Every checkpoint array must
/// match a store entry by name and shape, and every store entry must be
/// filled; any mismatch is a checkpoint error.
pub fn load_into<R: Real>(path: &Path, store: &mut ParamStore<R>) -> Result<()> {
    let mut r = BufReader::new(File::open(path)?);
    let _config = check_header(&mut r)?;

    let count = r_u32(&mut r)? as usize;
    if count != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} arrays, model has {}",
            store.len()
        )));
    }
    let mut filled = std::collections::BTreeSet::new();
    for _ in 0..count {
        let name = r_str(&mut r)?;
        let ndim = r_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let data: Vec<R> = r_f32s(&mut r, numel)?;
        let key = store
            .key(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{name}'")))?;
        if store.tensor(key).shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' has shape {:?} in the checkpoint but {:?} in the model",
                shape,
                store.tensor(key).shape()
            )));
        }
        store.tensor_mut(key).data_mut().copy_from_slice(&data);
        filled.insert(name);
    }
    for key in store.keys().collect::<Vec<_>>() {
        if !filled.contains(store.name(key)) {
            return Err(Error::Checkpoint(format!(
                "parameter '{}' missing from the checkpoint",
                store.name(key)
            )));
        }
    }

    let n_moments = r_u32(&mut r)? as usize;
    for _ in 0..n_moments {
        let name = r_str(&mut r)?;
        let n = r_u32(&mut r)? as usize;
        let m: Vec<R> = r_f32s(&mut r, n)?;
        let v: Vec<R> = r_f32s(&mut r, n)?;
        let key = store
            .key(&name)
            .ok_or_else(|| Error::Checkpoint(format!("moments for unknown parameter '{name}'")))?;
        store.set_moments(key, m, v)?;
    }

    let step = r_u64(&mut r)?;
    store.set_step_count(step);
    Ok(())
}
