//! Binary checkpoints.
//!
//! ```text
//! magic   b"MATNETCK"
//! version u32 LE
//! count   u64 LE
//! count x { name_len u32, name UTF-8, rank u32, extents u64 x rank, data f64 LE }
//! iteration u64, seed u64, config_len u32, config UTF-8
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MATNETCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub iteration: u64,
    pub seed: u64,
    /// Rendered run configuration the model was built from.
    pub config: String,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, iteration: u64, seed: u64, config: String) -> Self {
        Self {
            tensors: store.entries().iter().map(|e| (e.name.clone(), e.tensor.clone())).collect(),
            iteration,
            seed,
            config,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend((e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out.extend(self.iteration.to_le_bytes());
        out.extend(self.seed.to_le_bytes());
        out.extend((self.config.len() as u32).to_le_bytes());
        out.extend(self.config.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version} (expected {VERSION})"));
        }
        let count = r.u64()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "tensor name is not UTF-8".to_string())?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or("tensor extents overflow")?;
            let raw = r.take(n.checked_mul(8).ok_or("tensor too large")?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
            tensors.push((name, t));
        }
        let iteration = r.u64()?;
        let seed = r.u64()?;
        let len = r.u32()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "config is not UTF-8".to_string())?;
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self {
            tensors,
            iteration,
            seed,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|detail| Error::format(path, detail))
    }

    /// Copies the tensors into `store`, matching by name and shape.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::invalid(
                "restore",
                format!("checkpoint has {} tensors, model has {}", self.tensors.len(), store.len()),
            ));
        }
        for ((name, t), entry) in self.tensors.iter().zip(store.entries_mut()) {
            if *name != entry.name || t.shape() != entry.tensor.shape() {
                return Err(Error::invalid(
                    "restore",
                    format!("checkpoint tensor {name} {:?} vs model {} {:?}", t.shape(), entry.name, entry.tensor.shape()),
                ));
            }
            entry.tensor = t.clone();
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {} (wanted {n} more)", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
