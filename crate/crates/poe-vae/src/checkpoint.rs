//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"PVAE"
//! version u32 (currently 1)
//! seed    u64 (model init seed)
//! epoch   u32
//! cfg_len u32, followed by cfg_len bytes of JSON-serialized ModelConfig
//! n       u32 (number of arrays)
//! n times: name_len u16, name (UTF-8), elem_count u64, elem_count f32 values
//! ```
//!
//! Weights are stored as 32-bit floats. Arrays appear in the store's
//! deterministic insertion order, so save → load → save reproduces the file
//! byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::IxDyn;

use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, ModelGraph};
use crate::tape::Tensor;

const MAGIC: &[u8; 4] = b"PVAE";
const VERSION: u32 = 1;

pub fn save(graph: &ModelGraph, epoch: u32, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&graph.init_seed.to_le_bytes())?;
    w.write_all(&epoch.to_le_bytes())?;
    let cfg = serde_json::to_vec(&graph.config)?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    let n = graph.store().len() as u32;
    w.write_all(&n.to_le_bytes())?;
    for (_, entry) in graph.store().iter() {
        let name = entry.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(entry.value.len() as u64).to_le_bytes())?;
        for &v in entry.value.iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelGraph, u32)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let seed = read_u64(&mut r)?;
    let epoch = read_u32(&mut r)?;
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let config: ModelConfig = serde_json::from_slice(&cfg_bytes)?;
    let mut graph = build_model(config, seed)?;
    let n = read_u32(&mut r)? as usize;
    if n != graph.store().len() {
        return Err(Error::format(format!(
            "checkpoint holds {n} arrays, model expects {}",
            graph.store().len()
        )));
    }
    for idx in 0..n {
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::format("non-UTF8 array name"))?;
        let count = read_u64(&mut r)? as usize;
        let expected = graph.store().entry(idx);
        if expected.name != name {
            return Err(Error::format(format!(
                "array {idx} is '{name}', expected '{}'",
                expected.name
            )));
        }
        if expected.value.len() != count {
            return Err(Error::format(format!(
                "array '{name}' has {count} values, expected {}",
                expected.value.len()
            )));
        }
        let mut buf = vec![0u8; count * 4];
        r.read_exact(&mut buf)?;
        let data: Vec<f64> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let shape = expected.value.shape().to_vec();
        graph
            .store_mut()
            .set_value(idx, Tensor::from_shape_vec(IxDyn(&shape), data).unwrap())?;
    }
    // trailing garbage means a truncated or corrupted writer
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::format("trailing bytes after checkpoint payload"));
    }
    Ok((graph, epoch))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
