//! Named parameter registry and checkpoint serialisation.
//!
//! Checkpoints are a flat little-endian binary layout: magic "SGNF",
//! format version u32, tensor count u32, then per tensor (sorted by name)
//! a u16 name length, UTF-8 name, u8 rank, u32 per dimension and the values
//! as f64 in row-major order. Loading is strict: names and shapes must match
//! the receiving store exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::compute::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SGNF";
const VERSION: u32 = 1;

#[derive(Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a leaf tensor under a unique name and hand back a shared
    /// handle. Both trainable and frozen leaves live here so checkpoints
    /// capture the whole model.
    pub fn register(&mut self, name: &str, tensor: Tensor) -> Result<Tensor> {
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::contract(format!(
                "parameter name length {} out of range",
                name.len()
            )));
        }
        if self.params.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name.to_string(), tensor.clone());
        Ok(tensor)
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.params
            .get(name)
            .cloned()
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Name-sorted iteration; every walk over parameters is deterministic.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&self) {
        for t in self.params.values() {
            t.zero_grad();
        }
    }

    /// Sum of Frobenius norms over parameters whose name contains the filter,
    /// as a graph node so the regulariser contributes gradients.
    pub fn weight_norm_sum(&self, name_filter: &str) -> Result<Tensor> {
        let mut total: Option<Tensor> = None;
        for (name, t) in &self.params {
            if !name.contains(name_filter) {
                continue;
            }
            let n = t.norm_l2();
            total = Some(match total {
                Some(acc) => acc.add(&n)?,
                None => n,
            });
        }
        Ok(total.unwrap_or_else(|| Tensor::scalar(0.0)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, tensor) in &self.params {
            let shape = tensor.shape();
            if shape.len() > u8::MAX as usize {
                return Err(Error::contract(format!("tensor {name} rank too large")));
            }
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(shape.len() as u8);
            for d in &shape {
                buf.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in tensor.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Copy values from a checkpoint into the already-built store. The file
    /// and the store must describe exactly the same set of tensors; frozen
    /// flags on the receiving tensors are untouched.
    pub fn load_into(&self, path: &Path) -> Result<()> {
        let entries = read_checkpoint(path)?;
        if entries.len() != self.params.len() {
            return Err(Error::format(format!(
                "checkpoint {} holds {} tensors, model has {}",
                path.display(),
                entries.len(),
                self.params.len()
            )));
        }
        for (name, (shape, values)) in &entries {
            let tensor = self.params.get(name).ok_or_else(|| {
                Error::format(format!("checkpoint tensor {name} not present in model"))
            })?;
            if tensor.shape() != *shape {
                return Err(Error::format(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    shape,
                    tensor.shape()
                )));
            }
            tensor.set_values(values)?;
        }
        Ok(())
    }
}

type CheckpointEntries = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

fn read_exact_or_format(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(format!("checkpoint truncated while reading {what}")))
}

pub(crate) fn read_checkpoint(path: &Path) -> Result<CheckpointEntries> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    read_exact_or_format(&mut f, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::format(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    read_exact_or_format(&mut f, &mut u32buf, "version")?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    read_exact_or_format(&mut f, &mut u32buf, "tensor count")?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        read_exact_or_format(&mut f, &mut u16buf, "name length")?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact_or_format(&mut f, &mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format("checkpoint tensor name is not UTF-8"))?;
        let mut rank_buf = [0u8; 1];
        read_exact_or_format(&mut f, &mut rank_buf, "rank")?;
        let rank = rank_buf[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            read_exact_or_format(&mut f, &mut u32buf, "dimension")?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        let mut f64buf = [0u8; 8];
        for _ in 0..n {
            read_exact_or_format(&mut f, &mut f64buf, "values")?;
            values.push(f64::from_le_bytes(f64buf));
        }
        if entries.insert(name.clone(), (shape, values)).is_some() {
            return Err(Error::format(format!(
                "checkpoint holds duplicate tensor {name}"
            )));
        }
    }
    Ok(entries)
}
