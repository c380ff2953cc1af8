//! Named parameter storage, deterministic initialisation and checkpoints.
//!
//! Parameters are kept in 64-bit and cast to the working precision when they
//! are bound to a tape.
//!
//! Checkpoint layout (little-endian): the magic bytes `ERWP`, a `u32`
//! version, a `u32` record count, then per record a `u32` name length, the
//! UTF-8 name, a `u32` rank, `rank × u64` axis sizes and the values as `f64`.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Gradients, Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ERWP";
const VERSION: u32 = 1;

/// Ordered map of named trainable tensors.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: IndexMap<String, Tensor<f64>>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: IndexMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f64>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    /// Weight matrix `[fan_in × fan_out]` drawn from `U(-1/√fan_in, 1/√fan_in)`.
    pub fn add_weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.insert(name, Tensor::new(&[fan_in, fan_out], data)?)
    }

    pub fn add_constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::full(shape, value))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f64>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f64>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f64>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f64>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Sets every parameter whose name satisfies `pred` to zero.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, t) in self.params.iter_mut() {
            if pred(name) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Records every parameter as a trainable leaf on `tape`.
    pub fn bind<'t, T: Real>(&self, tape: &'t Tape<T>) -> Bindings<'t, T> {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v.cast())))
            .collect();
        Bindings { vars }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &s in t.shape() {
                w.write_all(&(s as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Loads a checkpoint; the initialisation stream restarts from `seed`.
    pub fn load(path: impl AsRef<Path>, seed: u64) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f, seed)
    }

    pub fn read_from<R: Read>(r: &mut R, seed: u64) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let count = read_u32(r)?;
        let mut store = ParamStore::new(seed);
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                read_exact(r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 8];
                read_exact(r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            store.insert(name, Tensor::new(&shape, data)?)?;
        }
        Ok(store)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Parameters recorded on one tape, looked up by name.
#[derive(Debug)]
pub struct Bindings<'t, T: Real> {
    vars: IndexMap<String, Var<'t, T>>,
}

impl<'t, T: Real> Bindings<'t, T> {
    /// Binds existing tape variables under the given names.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var<'t, T>)>) -> Self {
        Bindings {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    /// Gradient of every bound parameter, in 64-bit.
    pub fn collect(&self, grads: &Gradients<T>) -> ParamGrads {
        let grads = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.wrt(*v).iter().map(|g| g.as_f64()).collect()))
            .collect();
        ParamGrads { grads }
    }
}

/// Per-parameter gradients detached from any tape.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    grads: IndexMap<String, Vec<f64>>,
}

impl ParamGrads {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Adds `other` into `self` (for summing over a batch).
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (k, v) in &other.grads {
            let dst = self.grads.entry(k.clone()).or_insert_with(|| vec![0.0; v.len()]);
            dst.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.values_mut().flatten().for_each(|v| *v *= s);
    }
}
