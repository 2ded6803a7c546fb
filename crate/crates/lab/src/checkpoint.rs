//! `DNAC` checkpoints.
//!
//! Layout: magic `DNAC`, version u32 LE, descriptor length u32 LE plus the
//! UTF-8 descriptor (a JSON blueprint), tensor count u32 LE, then for each
//! tensor its name (u16 LE length + UTF-8), dtype code u8 (1 = f32,
//! 2 = f64), rank u8, dims as u64 LE and the raw LE values.
//!
//! Batchnorm running statistics are stored alongside the parameters with an
//! `@` prefix on their names.

use std::path::Path;

use decorr_core::models::{Dna, DnaSpec, Model, ModelSpec, ParamSet};
use decorr_core::{DType, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{label, read, write, FormatError, Reader, Result};

pub const MAGIC: &[u8; 4] = b"DNAC";
pub const VERSION: u32 = 1;
const BUFFER_MARK: char = '@';

/// Blueprint stored in the descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "blueprint", rename_all = "snake_case")]
pub enum Descriptor {
    Model(ModelSpec),
    Dna(DnaSpec),
}

/// Raw tensor as stored, keeping its on-disk precision.
#[derive(Debug, Clone, PartialEq)]
pub enum Stored {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl Stored {
    fn cast<T: Real>(&self) -> Tensor<T> {
        match self {
            Stored::F32(t) => t.cast(),
            Stored::F64(t) => t.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub descriptor: String,
    pub tensors: Vec<(String, Stored)>,
}

fn push_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) -> Result<()> {
    let nb = name.as_bytes();
    let len = u16::try_from(nb.len())
        .map_err(|_| FormatError::parse(name, 0, "tensor name longer than 65535 bytes"))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(nb);
    out.push(T::DTYPE as u8);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        match T::DTYPE {
            DType::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
    Ok(())
}

pub fn encode<T: Real>(descriptor: &str, params: &ParamSet<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
    out.extend_from_slice(descriptor.as_bytes());
    let count = params.params.len() + params.buffers.len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (k, t) in &params.params {
        push_tensor(&mut out, k, t)?;
    }
    for (k, t) in &params.buffers {
        push_tensor(&mut out, &format!("{BUFFER_MARK}{k}"), t)?;
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], file: &str) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, file);
    if r.take(4, "magic")? != MAGIC {
        return Err(FormatError::parse(file, 0, "bad magic, expected DNAC"));
    }
    let v = u32::from_le_bytes(r.array("version")?);
    if v != VERSION {
        return Err(FormatError::parse(file, 4, format!("unsupported version {v}")));
    }
    let dlen = u32::from_le_bytes(r.array("descriptor length")?) as usize;
    let at = r.pos;
    let descriptor = std::str::from_utf8(r.take(dlen, "descriptor")?)
        .map_err(|e| FormatError::parse(file, at + e.valid_up_to(), "descriptor is not UTF-8"))?
        .to_string();
    let count = u32::from_le_bytes(r.array("tensor count")?) as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = u16::from_le_bytes(r.array("name length")?) as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(nlen, "name")?)
            .map_err(|_| FormatError::parse(file, at, "tensor name is not UTF-8"))?
            .to_string();
        let at = r.pos;
        let [code, rank] = r.array::<2>("dtype and rank")?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(r.array("dimension")?) as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| FormatError::parse(file, at + 2, "dimensions overflow"))?;
        let stored = match code {
            1 => {
                let raw = r.take(n.saturating_mul(4), "f32 values")?;
                let v = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Stored::F32(Tensor::new(&shape, v)?)
            }
            2 => {
                let raw = r.take(n.saturating_mul(8), "f64 values")?;
                let v = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Stored::F64(Tensor::new(&shape, v)?)
            }
            c => return Err(FormatError::parse(file, at, format!("unknown dtype code {c}"))),
        };
        tensors.push((name, stored));
    }
    if r.remaining() != 0 {
        return Err(FormatError::parse(file, r.pos, "trailing bytes after last tensor"));
    }
    Ok(Checkpoint { descriptor, tensors })
}

impl Checkpoint {
    /// Parameters converted to `T` (exact when the stored precision is `T`).
    pub fn params<T: Real>(&self) -> ParamSet<T> {
        let mut ps = ParamSet::default();
        for (k, t) in &self.tensors {
            match k.strip_prefix(BUFFER_MARK) {
                Some(b) => ps.buffers.insert(b.to_string(), t.cast()),
                None => ps.params.insert(k.clone(), t.cast()),
            };
        }
        ps
    }

    pub fn blueprint(&self, file: &str) -> Result<Descriptor> {
        serde_json::from_str(&self.descriptor)
            .map_err(|e| FormatError::parse(file, 12, format!("descriptor: {e}")))
    }
}

pub fn save_params<T: Real>(path: &Path, descriptor: &str, params: &ParamSet<T>) -> Result<()> {
    write(path, &encode(descriptor, params)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&read(path)?, &label(path))
}

fn descriptor_json(d: &Descriptor) -> String {
    serde_json::to_string(d).expect("blueprints serialize")
}

pub fn save_model<T: Real>(path: &Path, m: &Model<T>) -> Result<()> {
    save_params(path, &descriptor_json(&Descriptor::Model(m.spec.clone())), &m.params)
}

pub fn save_dna<T: Real>(path: &Path, d: &Dna<T>) -> Result<()> {
    save_params(path, &descriptor_json(&Descriptor::Dna(d.spec.clone())), &d.params)
}

pub fn load_model<T: Real>(path: &Path) -> Result<Model<T>> {
    let c = load(path)?;
    match c.blueprint(&label(path))? {
        Descriptor::Model(spec) => Ok(Model { spec, params: c.params() }),
        Descriptor::Dna(_) => Err(FormatError::parse(&label(path), 12, "checkpoint holds a dual-neck autoencoder")),
    }
}

pub fn load_dna<T: Real>(path: &Path) -> Result<Dna<T>> {
    let c = load(path)?;
    match c.blueprint(&label(path))? {
        Descriptor::Dna(spec) => Ok(Dna { spec, params: c.params() }),
        Descriptor::Model(_) => Err(FormatError::parse(&label(path), 12, "checkpoint holds a single model")),
    }
}
