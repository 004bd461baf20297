//! Versioned named-tensor container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! "SPMKDCKP"            8 bytes
//! version               u32
//! phase                 u8 length + utf-8
//! epoch                 u64
//! config_hash           u64
//! entry count           u32
//! per entry:
//!   name                u32 length + utf-8
//!   dtype               u8   (0 = f32, 1 = f64)
//!   ndim                u32
//!   dims                u64 × ndim
//!   payload             row-major, dtype-sized LE values
//! ```

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"SPMKDCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            TensorData::F32(t) => t.to_le_bytes(),
            TensorData::F64(t) => t.to_le_bytes(),
        }
    }

    fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => TensorData::F32(t.cast()),
            DType::F64 => TensorData::F64(t.cast()),
        }
    }

    /// Exact when the dtypes agree; otherwise a numeric cast.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            TensorData::F32(t) => t.cast(),
            TensorData::F64(t) => t.cast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub data: TensorData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub phase: String,
    pub epoch: u64,
    pub config_hash: u64,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, phase: &str, epoch: u64, config_hash: u64) -> Self {
        let entries = store
            .iter()
            .map(|(_, p)| CheckpointEntry { name: p.name.clone(), data: TensorData::from_tensor(&p.value) })
            .collect();
        Checkpoint { version: VERSION, phase: phase.to_string(), epoch, config_hash, entries }
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.data)
    }

    /// Copies every stored tensor accepted by `selected` into `store`. Any
    /// name missing from the store, any shape difference, and any selected
    /// store tensor absent from the checkpoint is reported together in one
    /// transfer error; nothing is written in that case.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>, selected: impl Fn(&str) -> bool) -> Result<()> {
        let mut bad = Vec::new();
        let mut plan = Vec::new();
        for e in self.entries.iter().filter(|e| selected(&e.name)) {
            match store.id(&e.name) {
                None => bad.push(format!("{} (not in model)", e.name)),
                Some(id) if store.value(id).shape() != e.data.shape() => bad.push(format!(
                    "{} (checkpoint {:?}, model {:?})",
                    e.name,
                    e.data.shape(),
                    store.value(id).shape()
                )),
                Some(id) => plan.push((id, &e.data)),
            }
        }
        for (_, p) in store.iter().filter(|(_, p)| selected(&p.name)) {
            if self.get(&p.name).is_none() {
                bad.push(format!("{} (missing from checkpoint)", p.name));
            }
        }
        if !bad.is_empty() {
            return Err(Error::Transfer { mismatched: bad });
        }
        for (id, data) in plan {
            store.get_mut(id).value = data.to_tensor();
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.phase.len() as u8);
        out.extend_from_slice(self.phase.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(match e.data.dtype() {
                DType::F32 => 0,
                DType::F64 => 1,
            });
            let shape = e.data.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.data.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let plen = r.take(1)?[0] as usize;
        let phase = r.string(plen)?;
        let epoch = r.u64()?;
        let config_hash = r.u64()?;
        let count = r.u32()? as usize;
        let mut entries: Vec<CheckpointEntry> = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let nlen = r.u32()? as usize;
            let name = r.string(nlen)?;
            if entries.iter().any(|e| e.name == name) {
                return Err(Error::Checkpoint(format!("duplicate tensor name {name} at byte {at}")));
            }
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
            let data = match dtype {
                0 => {
                    let raw = r.take(numel.checked_mul(4).ok_or_else(|| r.eof())?)?;
                    let v = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    TensorData::F32(Tensor::new(&shape, v).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?)
                }
                1 => {
                    let raw = r.take(numel.checked_mul(8).ok_or_else(|| r.eof())?)?;
                    let v = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    TensorData::F64(Tensor::new(&shape, v).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?)
                }
                d => return Err(Error::Checkpoint(format!("{name}: unknown dtype tag {d}"))),
            };
            entries.push(CheckpointEntry { name, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes at offset {}", bytes.len() - r.pos, r.pos)));
        }
        Ok(Checkpoint { version, phase, epoch, config_hash, entries })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn eof(&self) -> Error {
        Error::Checkpoint(format!("truncated at byte offset {}", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| self.eof())?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        let at = self.pos;
        let raw = self.take(n)?;
        core::str::from_utf8(raw)
            .map(|s| s.to_string())
            .map_err(|_| Error::Checkpoint(format!("invalid utf-8 name at byte offset {at}")))
    }
}
