//! Named parameter storage and the `CFEKIT-W v1` weights format.
//!
//! Layout after the header line: one record per parameter, each being
//! `name_len: u32`, UTF-8 name, `rank: u32`, `rank × u32` dims, then the
//! values as little-endian `f32`. All integers are little-endian. Records
//! run to end of file.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8] = b"CFEKIT-W v1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    /// Logical dimensions as written to the weights file.
    pub dims: Vec<usize>,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn tensor_shape(dims: &[usize]) -> Result<[usize; 4]> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(Error::invalid(format!("unsupported parameter rank {}", dims.len())));
    }
    let mut shape = [1; 4];
    shape[..dims.len()].copy_from_slice(dims);
    Ok(shape)
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        dims: &[usize],
        values: Vec<T>,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let shape = tensor_shape(dims)?;
        let value = Tensor::new(shape, values)?;
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            kind,
            dims: dims.to_vec(),
            grad: Tensor::zeros(shape),
            value,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    dims: p.dims.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn to_records(&self) -> Vec<WeightRecord> {
        self.params
            .iter()
            .map(|p| WeightRecord {
                name: p.name.clone(),
                dims: p.dims.clone(),
                values: p.value.data().iter().map(|v| v.as_f32()).collect(),
            })
            .collect()
    }

    /// Overwrites values from records. Every parameter must be present with
    /// matching dimensions; unknown record names are an error.
    pub fn load_records(&mut self, records: &[WeightRecord]) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for r in records {
            let idx = *self.by_name.get(&r.name).ok_or_else(|| Error::Format {
                what: "weights file",
                detail: format!("unknown parameter {}", r.name),
            })?;
            let p = &mut self.params[idx];
            if p.dims != r.dims {
                return Err(Error::Format {
                    what: "weights file",
                    detail: format!("{}: dims {:?} expected {:?}", r.name, r.dims, p.dims),
                });
            }
            for (dst, &src) in p.value.data_mut().iter_mut().zip(&r.values) {
                *dst = T::of(src as f64);
            }
            seen[idx] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format {
                what: "weights file",
                detail: format!("missing parameter {}", self.params[i].name),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        write_weights(&mut w, &self.to_records()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let records = read_weights(&mut BufReader::new(f))?;
        self.load_records(&records)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn write_weights<W: Write>(w: &mut W, records: &[WeightRecord]) -> std::io::Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    for r in records {
        let name = r.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(r.dims.len() as u32).to_le_bytes())?;
        for &d in &r.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &r.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "weights file",
        detail: detail.into(),
    }
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| format_err(format!("truncated while reading {what}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_weights<R: Read>(r: &mut R) -> Result<Vec<WeightRecord>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| format_err(e.to_string()))?;
    if !bytes.starts_with(WEIGHTS_MAGIC) {
        return Err(format_err("missing CFEKIT-W v1 header"));
    }
    let mut cur = &bytes[WEIGHTS_MAGIC.len()..];
    let mut out = Vec::new();
    while !cur.is_empty() {
        let name_len = read_u32(&mut cur, "name length")? as usize;
        if cur.len() < name_len {
            return Err(format_err("truncated parameter name"));
        }
        let name = std::str::from_utf8(&cur[..name_len])
            .map_err(|_| format_err("parameter name is not UTF-8"))?
            .to_string();
        cur = &cur[name_len..];
        let rank = read_u32(&mut cur, "rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut cur, "dims")? as usize);
        }
        let count: usize = dims.iter().product();
        if cur.len() < count * 4 {
            return Err(format_err(format!("truncated values for {name}")));
        }
        let values = cur[..count * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        cur = &cur[count * 4..];
        out.push(WeightRecord { name, dims, values });
    }
    Ok(out)
}
