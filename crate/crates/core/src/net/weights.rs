//! CPW1 weight files.
//!
//! Little-endian: magic `CPW1`, `u32` tensor count, then per tensor a `u16` name
//! length, the UTF-8 name, `u8` ndim, `ndim × u32` dims and the `f32` data.
//! Kernels are stored 4-d `(c_out, c_in/groups, kh, kw)`; biases, BN affine
//! parameters and running statistics 1-d.

use std::path::Path;

use super::blocks::{Mode, ParamStore};
use super::network::{Architecture, Network};
use crate::{Error, Result, Shape, Tensor};

pub const CPW_MAGIC: &[u8; 4] = b"CPW1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightFile {
    pub tensors: Vec<NamedArray>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated CPW1 file while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl WeightFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CPW_MAGIC);
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Validation("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for t in &self.tensors {
            let name_len = u16::try_from(t.name.len())
                .map_err(|_| Error::Validation(format!("tensor name longer than 65535 bytes: {}", t.name)))?;
            let ndim = u8::try_from(t.dims.len())
                .map_err(|_| Error::Validation(format!("{}: too many dimensions", t.name)))?;
            let numel: u64 = t.dims.iter().map(|&d| d as u64).product();
            if numel != t.data.len() as u64 {
                return Err(Error::Validation(format!(
                    "{}: dims {:?} hold {numel} values but data has {}",
                    t.name,
                    t.dims,
                    t.data.len()
                )));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(ndim);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic").ok() != Some(CPW_MAGIC.as_slice()) {
            return Err(Error::Format("not a CPW1 file".into()));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for i in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?
                .to_string();
            let ndim = r.u8("ndim")? as usize;
            let dims = (0..ndim).map(|_| r.u32("dims")).collect::<Result<Vec<u32>>>()?;
            let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
            let bytes = numel
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format(format!("{name}: dims overflow")))?;
            let data = r
                .take(bytes, &name)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedArray { name, dims, data });
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                buf.len() - r.pos
            )));
        }
        Ok(WeightFile { tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn dims_of(shape: Shape, is_vector: bool) -> Vec<u32> {
    if is_vector {
        vec![shape.c as u32]
    } else {
        [shape.n, shape.c, shape.h, shape.w].iter().map(|&d| d as u32).collect()
    }
}

impl Network<f32> {
    /// All parameters and running statistics in layout order.
    pub fn to_weights(&self) -> WeightFile {
        let tensors = self
            .architecture()
            .params
            .iter()
            .map(|spec| {
                let t = self.params().get(&spec.name).expect("network holds every layout entry");
                NamedArray {
                    name: spec.name.clone(),
                    dims: dims_of(spec.shape, !spec.name.ends_with(".kernel")),
                    data: t.data().to_vec(),
                }
            })
            .collect();
        WeightFile { tensors }
    }

    /// Rebuilds a network for `arch` from a weight file. Every layout entry must be
    /// present exactly once with matching dims; unknown names are rejected.
    pub fn from_weights(arch: Architecture, weights: &WeightFile, mode: Mode) -> Result<Self> {
        let mut store = ParamStore::default();
        for t in &weights.tensors {
            let spec = arch
                .params
                .iter()
                .find(|p| p.name == t.name)
                .ok_or_else(|| Error::Validation(format!("weights contain unknown tensor {}", t.name)))?;
            let expected = dims_of(spec.shape, !spec.name.ends_with(".kernel"));
            if t.dims != expected {
                return Err(Error::Validation(format!(
                    "{}: dims {:?} do not match the architecture's {:?}",
                    t.name, t.dims, expected
                )));
            }
            if store.get(&t.name).is_some() {
                return Err(Error::Validation(format!("duplicate tensor {}", t.name)));
            }
            store.insert(spec, Tensor::from_vec(spec.shape, t.data.clone())?);
        }
        Network::from_parts(arch, store, mode)
    }
}
