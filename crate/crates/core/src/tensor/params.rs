use std::collections::BTreeMap;

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named `f32` parameters in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<f32>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Overwrites values from `(name, tensor)` pairs; every parameter must be present with its shape.
    pub fn load<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, t) in entries {
            let Some(&i) = self.index.get(name) else { continue };
            if self.tensors[i].shape() != t.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t.clone();
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Contract(format!("checkpoint is missing parameter {}", self.names[i])));
        }
        Ok(())
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, requires_grad: bool) -> Binding {
        Binding { vars: self.tensors.iter().map(|t| tape.leaf(t.cast(), requires_grad)).collect() }
    }
}

/// The tape variables standing for a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Wraps tape variables that stand for the store's parameters in id order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Leaf gradients collected from `tape`, zeros where none arrived.
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore) -> Grads {
        Grads {
            data: self
                .vars
                .iter()
                .zip(&store.tensors)
                .map(|(&v, t)| match tape.grad(v) {
                    Some(g) => g.iter().map(|x| x.f64() as f32).collect(),
                    None => vec![0.0; t.numel()],
                })
                .collect(),
        }
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub data: Vec<Vec<f32>>,
}

impl Grads {
    pub fn zeros(store: &ParamStore) -> Self {
        Self { data: store.tensors.iter().map(|t| vec![0.0; t.numel()]).collect() }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().flatten().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
    }
}
