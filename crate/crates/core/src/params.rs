//! Named trainable parameters.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// All trainable weights of a model, addressable by dotted name
/// (`enc.lstm_q.w_ih`, `img.fc_f.b`, ...). Iteration order is sorted by
/// name, which fixes the order of every derived computation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> {
        self.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }

    /// Records parameters as constants; used for evaluation.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }

    /// Merges `other` into `self`; entries already present are kept.
    pub fn merge_missing(&mut self, other: ParamStore) {
        for (k, v) in other.params {
            self.params.entry(k).or_insert(v);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }
}

/// Parameters recorded on one tape.
#[derive(Debug, Clone)]
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn from_vars(names: impl IntoIterator<Item = String>, vars: &[Var<'t>]) -> Self {
        Self {
            vars: names.into_iter().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Gradients after `backward`; unreachable parameters get zeros.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let g = v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape()));
                (k.clone(), g)
            })
            .collect()
    }
}

/// Fully connected layer `x · wᵀ + b` stored as `<prefix>.w: [out × in]`
/// and `<prefix>.b: [1 × out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear<'t> {
    pub w: Var<'t>,
    pub b: Var<'t>,
}

impl<'t> Linear<'t> {
    pub fn from_bound(bound: &Bound<'t>, prefix: &str) -> Result<Self> {
        Ok(Self {
            w: bound.get(&format!("{prefix}.w"))?,
            b: bound.get(&format!("{prefix}.b"))?,
        })
    }

    pub fn apply(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(self.w, Some(self.b))
    }

    pub fn out_dim(&self) -> usize {
        self.w.dims2().0
    }

    pub fn in_dim(&self) -> usize {
        self.w.dims2().1
    }
}

/// Glorot-uniform weights and zero bias.
pub fn init_linear<R: Rng>(store: &mut ParamStore, prefix: &str, out: usize, input: usize, rng: &mut R) {
    store.insert(format!("{prefix}.w"), xavier(rng, out, input));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[1, out]));
}

/// Glorot-uniform `[fan_out × fan_in]` matrix.
pub fn xavier<R: Rng>(rng: &mut R, fan_out: usize, fan_in: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, &[fan_out, fan_in], a)
}

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], a: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..=a)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bind_and_collect_grads() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::row(&[1.0, 2.0]));
        store.insert("b", Tensor::row(&[3.0]));
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let loss = bound.get("a").unwrap().sum();
        tape.backward(loss).unwrap();
        let grads = bound.grads();
        assert_eq!(grads["a"].data(), &[1.0, 1.0]);
        assert_eq!(grads["b"].data(), &[0.0]);
        assert!(matches!(bound.get("c"), Err(Error::MissingParam(_))));
    }

    #[test]
    fn xavier_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = xavier(&mut rng, 10, 14);
        let a = 0.5;
        assert_eq!(w.shape(), &[10, 14]);
        assert!(w.data().iter().all(|x| x.abs() <= a));
    }
}
