//! Named parameter storage and binding of parameters onto a tape.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor2;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub value: Tensor2<S>,
    /// Whether decoupled weight decay applies (false for biases and norms).
    pub decay: bool,
}

/// Ordered map of named parameters. Iteration order is lexicographic, which
/// keeps checksums and checkpoints stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    params: BTreeMap<String, Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2<S>, decay: bool) {
        self.params.insert(name.into(), Param { value, decay });
    }

    /// Weight matrix with `N(0, std^2)` entries, subject to weight decay.
    pub fn init_weight<R: Rng + ?Sized>(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut R) {
        self.insert(name, Tensor2::random_normal(rows, cols, std, rng), true);
    }

    pub fn init_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) {
        self.insert(name, Tensor2::zeros(rows, cols), false);
    }

    pub fn init_ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) {
        self.insert(name, Tensor2::filled(rows, cols, S::one()), false);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor2<S>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor2<S>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param<S>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, shapes and raw bit patterns of every value.
    pub fn checksum(&self) -> String {
        checksum_of(self.params.iter().map(|(k, p)| (k.as_str(), &p.value)))
    }

    /// Checksum restricted to parameters whose name satisfies `filter`.
    pub fn checksum_where(&self, filter: impl Fn(&str) -> bool) -> String {
        checksum_of(
            self.params
                .iter()
                .filter(|(k, _)| filter(k))
                .map(|(k, p)| (k.as_str(), &p.value)),
        )
    }
}

pub(crate) fn checksum_of<'a, S: Scalar>(items: impl Iterator<Item = (&'a str, &'a Tensor2<S>)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in items {
        h.update(name.as_bytes());
        h.update((t.rows() as u64).to_le_bytes());
        h.update((t.cols() as u64).to_le_bytes());
        for v in t.data() {
            h.update(v.bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Gradients keyed by parameter name.
pub type Gradients<S> = BTreeMap<String, Tensor2<S>>;

type TrainableFilter<'p> = Box<dyn Fn(&str) -> bool + 'p>;

/// A tape plus lazily bound parameters.
///
/// Parameters accepted by the trainable filter become gradient-carrying
/// leaves; all others are bound as constants, which is how stage-wise
/// freezing is enforced.
pub struct Graph<'p, S: Scalar> {
    tape: Tape<S>,
    store: &'p ParamStore<S>,
    bound: RefCell<BTreeMap<String, Var>>,
    trainable: TrainableFilter<'p>,
}

impl<'p, S: Scalar> Graph<'p, S> {
    /// Every parameter trainable.
    pub fn new(store: &'p ParamStore<S>) -> Self {
        Self::with_filter(store, |_| true)
    }

    /// No parameter carries gradients (evaluation).
    pub fn frozen(store: &'p ParamStore<S>) -> Self {
        Self::with_filter(store, |_| false)
    }

    pub fn with_filter(store: &'p ParamStore<S>, trainable: impl Fn(&str) -> bool + 'p) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: RefCell::new(BTreeMap::new()),
            trainable: Box::new(trainable),
        }
    }

    #[inline]
    pub fn tape(&self) -> &Tape<S> {
        &self.tape
    }

    pub fn store(&self) -> &'p ParamStore<S> {
        self.store
    }

    /// Binds (once) and returns the named parameter.
    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.borrow().get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = self.tape.leaf(value, (self.trainable)(name));
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        (self.trainable)(name)
    }

    /// Runs the reverse pass and returns gradients for every bound trainable
    /// parameter (zeros when the loss does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let mut per_node = self.tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, v) in self.bound.borrow().iter() {
            if (self.trainable)(name) {
                if let Some(g) = per_node[v.index()].take() {
                    out.insert(name.clone(), g);
                }
            }
        }
        Ok(out)
    }
}
