//! Named parameter storage shared by every trainable component.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
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

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of scalar entries across trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// Puts every parameter on `tape`: trainable ones as differentiable
    /// leaves, the rest as constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    /// Same as [`bind`](Self::bind) with every parameter held constant.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Binding {
        let vars = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        Binding { vars }
    }

    /// Binds everything as constants except the given overrides, which are
    /// used in place of their parameters. Lets finite-difference checks own
    /// the leaves they perturb.
    pub fn bind_with(&self, tape: &mut Tape<T>, overrides: &[(ParamId, Var)]) -> Binding {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| match overrides.iter().find(|(id, _)| id.0 == i) {
                Some(&(_, v)) => v,
                None => tape.constant(p.value.clone()),
            })
            .collect();
        Binding { vars }
    }

    /// Replaces a value, keeping its shape.
    pub fn assign(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "assign {}: {:?} vs {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }
}

/// Per-tape view of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients aligned with store order; `None` where nothing flowed.
    pub fn collect<T: Real>(&self, grads: &mut Grads<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

impl std::ops::Index<ParamId> for Binding {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
