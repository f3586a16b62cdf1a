// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether AdamW applies weight decay to this tensor.
    pub decay: bool,
}

/// Named parameters in a fixed order (that order is the checkpoint layout).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

pub(crate) enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, decay });
        Ok(())
    }

    pub(crate) fn init<R: Rng>(
        &mut self,
        rng: &mut R,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        decay: bool,
    ) -> Result<()> {
        let mut t = Tensor::zeros(shape);
        match init {
            Init::Zeros => {}
            Init::Ones => t.data_mut().iter_mut().for_each(|v| *v = T::one()),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                for v in t.data_mut() {
                    *v = T::from_f64(dist.sample(rng));
                }
            }
        }
        self.push(name, t, decay)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.position(name)
            .map(|i| &self.params[i].value)
            .ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let i = self.position(name).ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))?;
        Ok(&mut self.params[i].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), decay: p.decay })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, graph: &mut Graph<T>, requires_grad: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let mut t = p.value.clone();
                t.requires_grad = requires_grad;
                graph.leaf(t)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Graph handles of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var<T: Scalar>(&self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
