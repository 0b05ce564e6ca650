//! Checkpoint container.
//!
//! Layout: `MMDL`, u32 version, the architecture descriptor as a
//! length-prefixed string, u32 tensor count, then per tensor (in name
//! order) the name, u32 rank, u64 dims and f64 values, all little-endian.

use std::path::Path;

use mmdl_core::nets::{ArchConfig, ModelParams};
use mmdl_core::Tensor;

use crate::error::Result;
use crate::wire::{read_file, write_file, Reader, Writer};

const MAGIC: &[u8; 4] = b"MMDL";
const VERSION: u32 = 1;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.str(&params.arch.to_descriptor(params.modality));
    w.u32(params.len() as u32);
    for (name, t) in params.iter() {
        w.str(name);
        w.u32(t.rank() as u32);
        t.shape().iter().for_each(|&d| w.u64(d as u64));
        t.data().iter().for_each(|&v| w.f64(v));
    }
    w.buf
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let mut r = Reader::new(bytes, path);
    r.expect_magic(MAGIC, VERSION)?;
    let (arch, modality) = ArchConfig::parse_descriptor(&r.str()?)?;
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(r.err(format!("tensor `{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.err("shape overflow"))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| r.err("shape overflow"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    r.finish()?;
    Ok(ModelParams::from_tensors(arch, modality, tensors)?)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    write_file(path, &encode(params))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    decode(&read_file(path)?, path)
}
