//! Named parameter storage and the binary checkpoint container.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic  "LMAC"
//! version u32 (= 1)
//! count   u32
//! count × { name_len u32, name UTF-8, rank u32, extents rank × u64, values f32 × numel }
//! ```

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::autodiff::{Graph, Gradients, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LMAC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Role of a parameter; decides weight decay and post-step constraints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Projection and affine weight matrices. The only kind that is decayed.
    Weight,
    Bias,
    Norm,
    Query,
    /// Softmax temperature, kept at or above a floor after every step.
    Temperature,
    Fusion,
}

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<S>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<S = f32> {
    params: Vec<Param<S>>,
}

/// Parameters of one store bound as leaves of a graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps graph leaves created in store order, e.g. by a gradient checker.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, kind, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph<S>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.param(p.value.clone())).collect(),
        }
    }

    /// Gradients for every parameter in store order, zero where none flowed.
    pub fn gradients(&self, bound: &Bound, grads: &Gradients<S>) -> Vec<Tensor<S>> {
        bound.vars.iter().map(|&v| grads.tensor(v)).collect()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Replaces every value with the same-named entry of `loaded`, failing
    /// with a name/shape diff when the two sets disagree.
    pub fn load(&mut self, loaded: Vec<(String, Tensor<f32>)>) -> Result<()> {
        let ours: BTreeSet<&str> = self.params.iter().map(|p| p.name.as_str()).collect();
        let theirs: BTreeSet<&str> = loaded.iter().map(|(n, _)| n.as_str()).collect();
        let missing: Vec<&str> = ours.difference(&theirs).copied().collect();
        let unexpected: Vec<&str> = theirs.difference(&ours).copied().collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint does not match model: missing from checkpoint {missing:?}, not in model {unexpected:?}"
            )));
        }
        for (name, value) in loaded {
            let id = self.find(&name).expect("name sets agree");
            let current = &self.params[id.0].value;
            if current.shape() != value.shape() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                    value.shape(),
                    current.shape()
                )));
            }
            self.params[id.0].value = value.cast();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        write_checkpoint(&mut w, self).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn write_checkpoint<S: Scalar, W: Write>(w: &mut W, store: &ParamStore<S>) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(store.params.len() as u32)?;
    for p in &store.params {
        let name = p.name.as_bytes();
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name)?;
        w.write_u32::<LittleEndian>(p.value.rank() as u32)?;
        for &e in p.value.shape() {
            w.write_u64::<LittleEndian>(e as u64)?;
        }
        for x in p.value.data() {
            w.write_f32::<LittleEndian>(x.f64() as f32)?;
        }
    }
    Ok(())
}

/// Reads every `(name, tensor)` record of a checkpoint file.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes).map_err(|detail| Error::format(path, detail))
}

fn parse_checkpoint(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor<f32>)>, String> {
    let mut r = bytes;
    let eof = |_| "unexpected end of file".to_string();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format!("bad magic {magic:?}"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(eof)?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = r.read_u32::<LittleEndian>().map_err(eof)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        if len > r.len() {
            return Err("unexpected end of file".into());
        }
        let (name, rest) = r.split_at(len);
        let name = String::from_utf8(name.to_vec()).map_err(|e| format!("parameter name: {e}"))?;
        r = rest;
        let rank = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u64::<LittleEndian>().map_err(eof)? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel.checked_mul(4).is_none_or(|n| n > r.len()) {
            return Err(format!("payload of {name} is truncated"));
        }
        let mut data = vec![0f32; numel];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(eof)?;
        let t = Tensor::new(&shape, data).map_err(|e| format!("{name}: {e}"))?;
        out.push((name, t));
    }
    if !r.is_empty() {
        return Err(format!("{} trailing bytes", r.len()));
    }
    Ok(out)
}
