//! Named parameter tensors, their binding onto a tape, and checkpoint
//! directories (one FTT file per tensor plus a `manifest.txt`).

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::tape::{Tape, Var};
use crate::tensor::{read_ftt, write_ftt, Dtype, Tensor};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) {
        let name = name.into();
        tensor.set_requires_grad(true);
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(e) => e.1 = tensor,
            None => self.entries.push((name, tensor)),
        }
    }

    /// Uniform initialisation in `[-bound, bound]`.
    pub fn insert_uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) {
        let t = if bound > 0.0 {
            Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
        } else {
            Tensor::zeros(shape)
        };
        self.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Registers every parameter as a differentiable leaf of `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<BoundParams<'t>> {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| Ok((n.clone(), tape.variable(t.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundParams { vars })
    }

    /// Adds the tape gradients of `bound` into each parameter's gradient buffer.
    pub fn accumulate_grads(&mut self, bound: &BoundParams<'_>) -> Result<()> {
        for (name, var) in &bound.vars {
            if let Some(g) = var.grad() {
                self.get_mut(name)?.accumulate_grad(g.data())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut manifest = KvFile::new();
        for (i, (name, t)) in self.entries.iter().enumerate() {
            let file = format!("p{:04}.ftt", i);
            write_ftt(dir.join(&file), t, Dtype::F64)?;
            manifest.set(name, file);
        }
        manifest.save(dir.join(MANIFEST))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = KvFile::load(dir.join(MANIFEST))?;
        let mut store = ParamStore::new();
        for (name, file) in manifest.iter() {
            if file.contains('/') || file.contains("..") {
                return Err(Error::format("checkpoint manifest", format!("unsafe file name `{}`", file)));
            }
            store.insert(name, read_ftt(dir.join(file))?);
        }
        Ok(store)
    }
}

/// Tape leaves for a [`ParamStore`], addressable by name.
pub struct BoundParams<'t> {
    vars: Vec<(String, Var<'t>)>,
}

impl<'t> BoundParams<'t> {
    /// Pairs names with already-created tape values.
    pub fn from_vars(names: impl IntoIterator<Item = String>, vars: &[Var<'t>]) -> Result<Self> {
        let names: Vec<String> = names.into_iter().collect();
        if names.len() != vars.len() {
            return Err(Error::invalid(format!("{} names for {} values", names.len(), vars.len())));
        }
        Ok(BoundParams {
            vars: names.into_iter().zip(vars.iter().copied()).collect(),
        })
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.iter().any(|(n, _)| n == name)
    }
}
