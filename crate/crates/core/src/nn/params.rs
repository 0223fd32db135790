use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand::distr::Uniform;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            frozen: false,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.index
            .range(prefix.to_string()..)
            .take_while(move |(k, _)| k.starts_with(prefix))
            .map(|(_, id)| *id)
    }

    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        let ids: Vec<_> = self.ids_with_prefix(prefix).collect();
        for id in ids {
            self.params[id.0].frozen = frozen;
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Hex SHA-256 over every parameter whose name starts with `prefix`, in name order.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for id in self.ids_with_prefix(prefix) {
            let p = &self.params[id.0];
            h.update(p.name.as_bytes());
            p.value.digest_into(&mut h);
        }
        hex::encode(h.finalize())
    }

    /// Checksum over all frozen parameters.
    pub fn frozen_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, id) in &self.index {
            let p = &self.params[id.0];
            if p.frozen {
                h.update(name.as_bytes());
                p.value.digest_into(&mut h);
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes parameters under `prefix` to a blob file. Format per entry:
    /// name length (u32), name bytes, rank (u32), dims (u64 each), values (f64),
    /// all little-endian.
    pub fn save_blob(&self, prefix: &str, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(path, e);
        let ids: Vec<_> = self.ids_with_prefix(prefix).collect();
        w.write_u32::<LittleEndian>(ids.len() as u32).map_err(io)?;
        for id in ids {
            let p = &self.params[id.0];
            w.write_u32::<LittleEndian>(p.name.len() as u32).map_err(io)?;
            w.write_all(p.name.as_bytes()).map_err(io)?;
            w.write_u32::<LittleEndian>(p.value.shape().len() as u32).map_err(io)?;
            for &d in p.value.shape() {
                w.write_u64::<LittleEndian>(d as u64).map_err(io)?;
            }
            for &x in p.value.data() {
                w.write_f64::<LittleEndian>(x).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    /// Overwrites values of existing parameters from a blob. Every entry must
    /// name a known parameter with a matching shape.
    pub fn load_blob(&mut self, path: &Path) -> Result<usize> {
        let entries = read_blob(path)?;
        let n = entries.len();
        for (name, t) in entries {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Integrity(format!("unknown parameter `{name}` in {path:?}")))?;
            let cur = &mut self.params[id.0].value;
            if cur.shape() != t.shape() {
                return Err(Error::shape(cur.shape(), t.shape()));
            }
            *cur = t;
        }
        Ok(n)
    }
}

pub fn read_blob(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let io = |e| Error::io(path, e);
    let count = r.read_u32::<LittleEndian>().map_err(io)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Integrity(format!("non-utf8 parameter name in {path:?}")))?;
        let rank = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u64::<LittleEndian>().map_err(io)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0; numel];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(io)?;
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

/// Creates parameters under a name prefix with seeded initialization.
pub struct ParamBuilder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    /// Sub-builder with `name` appended to the prefix.
    pub fn pp(&mut self, name: impl std::fmt::Display) -> ParamBuilder<'_, R> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let dist = Uniform::new_inclusive(-bound, bound)
            .map_err(|e| Error::param("bound", e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.sample(dist)).collect();
        let t = Tensor::new(shape, data)?;
        self.store.insert(self.full_name(name), t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        let t = Tensor::new(shape, data)?;
        self.store.insert(self.full_name(name), t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store
            .insert(self.full_name(name), Tensor::full(shape, value))
    }
}
