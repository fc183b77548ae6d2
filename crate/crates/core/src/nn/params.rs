use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;

/// Parameter ownership, used for the decoupling and sharing checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    ObjectEncoder,
    SentenceEncoder,
    CrossEncoder,
    CrossDecoder,
    WordClassifier,
    ObjectClassifier,
    IsmPool,
    /// Finetuning heads.
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered parameter list. Order is the binding order on a [`crate::autodiff::Graph`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    names: Vec<String>,
    groups: Vec<Group>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, tensor: Tensor) -> ParamId {
        self.tensors.push(tensor.with_grad());
        self.names.push(name.into());
        self.groups.push(group);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn group(&self, index: usize) -> Group {
        self.groups[index]
    }

    pub fn indices_in(&self, group: Group) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| self.groups[i] == group)
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Sets every parameter of `group` to zero.
    pub fn zero_group(&mut self, group: Group) {
        for i in 0..self.len() {
            if self.groups[i] == group {
                self.tensors[i].data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Creates parameters with seeded N(0, σ²) weights, zero biases and unit gains.
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    std: f64,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: ChaCha8Rng, std: f64) -> Self {
        ParamBuilder { store, rng, std }
    }

    pub fn normal(&mut self, name: &str, group: Group, shape: &[usize]) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, self.std).expect("positive std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.store
            .add(name, group, Tensor::new(shape.to_vec(), data).expect("sized"))
    }

    pub fn constant(&mut self, name: &str, group: Group, shape: &[usize], value: f64) -> ParamId {
        let mut t = Tensor::zeros(shape);
        t.data_mut().iter_mut().for_each(|v| *v = value);
        self.store.add(name, group, t)
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        &mut self.rng
    }
}
