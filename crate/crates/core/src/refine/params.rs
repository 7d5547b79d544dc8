use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A learnable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorGrad {
    pub value: Tensor,
    pub grad: Tensor,
}

impl TensorGrad {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        TensorGrad { value, grad }
    }
}

/// Named parameters in a fixed registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    entries: Vec<(String, TensorGrad)>,
    index: HashMap<String, usize>,
}

/// Tape handles of every parameter for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Pairs `vars` with parameter names in order.
    pub fn from_names<'a>(names: impl Iterator<Item = &'a str>, vars: Vec<Var>) -> Bound {
        let index = names.enumerate().map(|(i, n)| (n.to_string(), i)).collect();
        Bound { vars, index }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, TensorGrad::new(value)));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorGrad)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut TensorGrad)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&TensorGrad> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut TensorGrad> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    /// Records every parameter value as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.entries.iter().map(|(_, t)| tape.leaf(t.value.clone())).collect(),
            index: self.index.clone(),
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in &mut self.entries {
            t.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the gradients of a backward pass into each parameter's `grad`.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for ((_, t), &v) in self.entries.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(v) {
                t.grad.add_assign(g);
            }
        }
    }

    /// `value -= lr * grad` for every parameter.
    pub fn sgd_step(&mut self, lr: f64) {
        for (_, t) in &mut self.entries {
            let grad = t.grad.data().to_vec();
            for (v, g) in t.value.data_mut().iter_mut().zip(grad) {
                *v -= lr * g;
            }
        }
    }

    /// Uniform in `+-1/sqrt(fan_in)` from a ChaCha8 stream seeded with
    /// `seed`, drawn in registration order.
    pub fn init_uniform(&mut self, seed: u64, fan_in: impl Fn(&str) -> usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in &mut self.entries {
            let bound = 1.0 / (fan_in(name).max(1) as f64).sqrt();
            for v in t.value.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
    }

    pub fn write_checkpoint(&self, mut out: impl Write) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            let shape = t.value.shape();
            out.write_all(&(shape.len() as u32).to_le_bytes())?;
            for d in shape {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.value.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(mut input: impl Read) -> Result<Params> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut input)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut input)?;
        let mut params = Params::new();
        for _ in 0..count {
            let len = read_u32(&mut input)? as usize;
            if len > 4096 {
                return Err(Error::Checkpoint(format!("name length {len}")));
            }
            let mut name = vec![0u8; len];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not utf-8".into()))?;
            let ndims = read_u32(&mut input)?;
            if ndims != 4 {
                return Err(Error::Checkpoint(format!("{name}: expected 4 dims, got {ndims}")));
            }
            let mut shape = [0usize; 4];
            for d in &mut shape {
                let mut b = [0u8; 8];
                input.read_exact(&mut b)?;
                *d = usize::try_from(u64::from_le_bytes(b))
                    .map_err(|_| Error::Checkpoint(format!("{name}: dimension overflow")))?;
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= 1 << 28)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: tensor too large")))?;
            let mut bytes = vec![0u8; n * 8];
            input.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Params> {
        Params::read_checkpoint(std::io::Cursor::new(std::fs::read(path)?))
    }

    /// Replaces values from `other`, which must hold the same names and
    /// shapes in the same order.
    pub fn assign_from(&mut self, other: &Params) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for ((name, t), (oname, o)) in self.entries.iter_mut().zip(&other.entries) {
            if name != oname || t.value.shape() != o.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name} {:?} does not match {oname} {:?}",
                    t.value.shape(),
                    o.value.shape()
                )));
            }
            t.value = o.value.clone();
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MFREFINE";
pub const CHECKPOINT_VERSION: u32 = 1;

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
