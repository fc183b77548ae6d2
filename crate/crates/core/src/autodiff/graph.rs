use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// A tape with a parameter list bound as its first leaves.
///
/// Model code receives parameters as [`Var`]s through [`Graph::param`], so one
/// forward function serves training, evaluation and finite-difference checks.
pub struct Graph {
    tape: Tape,
    params: Vec<Var>,
    counters: BTreeMap<&'static str, usize>,
}

impl Graph {
    pub fn new(params: &[Tensor]) -> Self {
        let mut tape = Tape::new();
        let params = params.iter().map(|p| tape.leaf(p.clone())).collect();
        Graph {
            tape,
            params,
            counters: BTreeMap::new(),
        }
    }

    /// Binds `params` without gradient tracking (inference).
    pub fn frozen(params: &[Tensor]) -> Self {
        let mut tape = Tape::new();
        let params = params.iter().map(|p| tape.constant(p.clone())).collect();
        Graph {
            tape,
            params,
            counters: BTreeMap::new(),
        }
    }

    pub fn param(&self, index: usize) -> Var {
        self.params[index]
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn bump(&mut self, counter: &'static str) {
        *self.counters.entry(counter).or_default() += 1;
    }

    pub fn count(&self, counter: &str) -> usize {
        self.counters.get(counter).copied().unwrap_or(0)
    }

    pub fn counters(&self) -> &BTreeMap<&'static str, usize> {
        &self.counters
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.tape.value(v).item()
    }

    /// Runs the reverse sweep and returns one gradient per bound parameter
    /// (zeros for parameters the loss does not reach).
    pub fn backward(self, loss: Var) -> Result<Vec<Vec<f64>>> {
        let sizes: Vec<usize> = self
            .params
            .iter()
            .map(|&p| self.tape.value(p).numel())
            .collect();
        let params = self.params;
        let mut grads: Gradients = self.tape.backward(loss)?;
        Ok(params
            .iter()
            .zip(sizes)
            .map(|(&p, n)| grads.take(p).unwrap_or_else(|| vec![0.0; n]))
            .collect())
    }
}

impl Deref for Graph {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
