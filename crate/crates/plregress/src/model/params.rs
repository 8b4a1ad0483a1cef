//! Parameter storage and the per-pass graph context.
//!
//! Parameters live outside any tape as plain arrays, keyed by a stable
//! hierarchical name. Each forward/backward pass binds them onto a fresh
//! [`Tape`] through a [`Graph`], which also collects their gradients after
//! `backward()`. Inference passes bind them as frozen leaves so they can be
//! shared read-only across threads.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::tensor::{Arr, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

pub struct ParamStore {
    entries: Vec<(String, Arr)>,
    by_name: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn alloc(&mut self, name: impl Into<String>, value: Arr) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.entries[id.0].1
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.entries[id.0].1
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub(crate) fn index_of(&self, id: ParamId) -> usize {
        id.0
    }
}

/// One forward/backward pass: a fresh tape plus lazily bound parameters.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: RefCell<Vec<Option<Tensor>>>,
    trainable: bool,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, trainable: bool) -> Self {
        Self::from_tape(store, Tape::new(), trainable)
    }

    /// Binds onto an existing tape (used when composing with externally
    /// created tensors, e.g. in gradient checks).
    pub fn from_tape(store: &'s ParamStore, tape: Tape, trainable: bool) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            trainable,
        }
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Tape leaf for a parameter, bound once per pass.
    pub fn param(&self, id: ParamId) -> Tensor {
        let idx = self.store.index_of(id);
        let mut bound = self.bound.borrow_mut();
        if let Some(t) = &bound[idx] {
            return t.clone();
        }
        let t = self
            .tape
            .leaf(self.store.value(id).clone(), self.trainable);
        bound[idx] = Some(t.clone());
        t
    }

    pub fn constant(&self, value: Arr) -> Tensor {
        self.tape.constant(value)
    }

    /// Gradients accumulated on bound parameters, aligned with store order.
    /// Unbound or untouched parameters yield `None`.
    pub fn param_grads(&self) -> Vec<Option<Arr>> {
        self.bound
            .borrow()
            .iter()
            .map(|slot| slot.as_ref().and_then(|t| t.grad()))
            .collect()
    }
}

/// Xavier-uniform weight initialization.
pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Arr {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Arr::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit))
}

/// Fully connected layer `x @ w + b`.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = ps.alloc(format!("{name}.w"), xavier_uniform(rng, fan_in, fan_out));
        let b = ps.alloc(format!("{name}.b"), Arr::zeros((1, fan_out)));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Tensor {
        x.matmul(&g.param(self.w)).add_row(&g.param(self.b))
    }
}

/// MLP over the given widths (`widths[0]` is the input dimension), ReLU
/// between layers, linear output.
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, rng: &mut impl Rng, name: &str, widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "MLP needs at least input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Tensor {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, &h);
            if i != last {
                h = h.relu();
            }
        }
        h
    }
}

/// Row-wise layer normalization with learned gain and shift.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize, eps: f64) -> Self {
        let gamma = ps.alloc(format!("{name}.gamma"), Arr::ones((1, width)));
        let beta = ps.alloc(format!("{name}.beta"), Arr::zeros((1, width)));
        Self { gamma, beta, eps }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Tensor {
        x.layer_norm_rows(&g.param(self.gamma), &g.param(self.beta), self.eps)
    }
}
