use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{NnError, Result};

const MAGIC: &[u8; 4] = b"AFNN";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    /// Gaussian init with the given standard deviation.
    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
        self.insert(name, Tensor::new(shape, data).expect("consistent"))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>) -> ParamId {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>) -> ParamId {
        self.insert(name, Tensor::full(shape, T::one()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Serializes every parameter in insertion order.
    ///
    /// Layout: magic `AFNN`, u32 version, dtype tag, u32 count, then per
    /// entry `u32 name_len, name, u32 ndim, u64 dims.., little-endian data`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * T::BYTES + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let tag = T::DTYPE.as_bytes();
        out.extend_from_slice(&(tag.len() as u32).to_le_bytes());
        out.extend_from_slice(tag);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Archive("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(NnError::Archive(format!("unsupported version {version}")));
        }
        let tag_len = read_u32(&mut r)? as usize;
        let mut tag = vec![0u8; tag_len];
        read_exact(&mut r, &mut tag)?;
        if tag != T::DTYPE.as_bytes() {
            return Err(NnError::Archive(format!(
                "archive dtype {} does not match {}",
                String::from_utf8_lossy(&tag),
                T::DTYPE
            )));
        }
        let count = read_u32(&mut r)? as usize;
        let mut store = Self::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| NnError::Archive("parameter name is not utf-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * T::BYTES];
            read_exact(&mut r, &mut raw)?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            if store.index.contains_key(&name) {
                return Err(NnError::Archive(format!("duplicate parameter {name}")));
            }
            store.insert(name, Tensor::new(shape, data)?);
        }
        if !r.is_empty() {
            return Err(NnError::Archive("trailing bytes".into()));
        }
        Ok(store)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| NnError::Archive(e.to_string()))?;
        Self::from_bytes(&buf)
    }

    /// Hex SHA-256 of the archive bytes.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Hex SHA-256 over the parameters whose name satisfies `filter`.
    pub fn subset_hash(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            if filter(name) {
                hasher.update(name.as_bytes());
                let mut buf = Vec::with_capacity(t.len() * T::BYTES);
                for &v in t.data() {
                    v.write_le(&mut buf);
                }
                hasher.update(&buf);
            }
        }
        hex::encode(hasher.finalize())
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if r.len() < buf.len() {
        return Err(NnError::Archive("truncated archive".into()));
    }
    let (head, tail) = r.split_at(buf.len());
    buf.copy_from_slice(head);
    *r = tail;
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
