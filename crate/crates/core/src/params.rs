//! Named trainable tensors and their binding onto a tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Included in the L2 penalty.
    pub regularize: bool,
    /// Gradients arrive as row gathers (embedding tables).
    pub sparse: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, regularize: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            regularize,
            sparse: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_sparse(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        regularize: bool,
    ) -> ParamId {
        let id = self.add(name, value, regularize);
        self.params[id.0].sparse = true;
        id
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

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn sparse_indices(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params[i].sparse)
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter on `tape` without copying.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| {
                    if p.sparse {
                        tape.sparse_param(&p.value)
                    } else {
                        tape.param(&p.value)
                    }
                })
                .collect(),
        )
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(pub Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl From<&[Var]> for Bound {
    fn from(v: &[Var]) -> Self {
        Bound(v.to_vec())
    }
}

/// Xavier-normal matrix: N(0, 2/(fan_in + fan_out)).
pub fn xavier_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    normal(&[rows, cols], std, rng)
}

pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("shape matches length")
}
