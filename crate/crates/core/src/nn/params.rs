use std::io::{Read, Write};

use rand::Rng;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const NNP_MAGIC: &[u8; 4] = b"NNP1";

/// Role of a parameter; `Rho` values are clamped to `[0, 1]` after updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Rho,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

/// Tape leaves for every parameter of one store.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Binding over caller-created leaves, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-parameter gradients in store order; unreached parameters get zeros.
    pub fn collect<T: Scalar>(&self, grads: &Gradients<T>) -> Vec<Vec<T>> {
        self.vars.iter().map(|&v| grads.get_or_zero(v)).collect()
    }
}

/// Kaiming-uniform initialization: `U(-b, b)` with `b = gain * sqrt(3 / fan_in)`.
pub fn kaiming_uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: usize, gain: f64) -> Tensor<T> {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect();
    Tensor { shape, data }
}

/// Gain for a leaky ReLU with the given negative slope.
pub fn leaky_gain(slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), kind, value });
        ParamId(self.params.len() - 1)
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

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places every parameter on the tape as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        self.bind_with(tape, true)
    }

    /// Places parameters as constants; used when a network is only evaluated.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Binding {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape<T>, requires_grad: bool) -> Binding {
        let vars = self.params.iter().map(|p| tape.leaf(p.value.clone(), requires_grad)).collect();
        Binding { vars }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.data.iter().all(|v| v.is_finite()))
    }

    /// Serializes as NNP1 (little-endian, `f32` values).
    pub fn write_nnp<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(NNP_MAGIC)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(p.value.shape.len() as u32).to_le_bytes())?;
            for &d in &p.value.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &p.value.data {
                w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Loads NNP1 values into an existing store; names and shapes must match.
    pub fn read_nnp<R: Read>(&mut self, r: R) -> Result<()> {
        self.load_entries(read_nnp_entries::<T, R>(r)?)
    }

    /// Replaces every parameter value from `(name, tensor)` entries.
    pub fn load_entries(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, network has {}",
                entries.len(),
                self.params.len()
            )));
        }
        for (name, t) in entries {
            let id = self.find(&name).ok_or_else(|| Error::Format(format!("unknown parameter {name:?}")))?;
            let p = &mut self.params[id.0];
            if p.value.shape != t.shape {
                return Err(Error::Format(format!("parameter {name:?}: shape {:?}, expected {:?}", t.shape, p.value.shape)));
            }
            p.value = t;
        }
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Raw `(name, tensor)` entries of an NNP1 stream.
pub fn read_nnp_entries<T: Scalar, R: Read>(mut r: R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("missing NNP1 magic".into()))?;
    if &magic != NNP_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        if len > 1 << 16 {
            return Err(Error::Format(format!("parameter name length {len} too large")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("parameter rank {rank} too large")));
        }
        let shape = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        out.push((name, Tensor { shape, data }));
    }
    Ok(out)
}
