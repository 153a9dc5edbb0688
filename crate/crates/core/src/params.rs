//! Named parameter storage shared by all model components.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{linear, Conv2dArgs, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Learning-rate group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Encoder,
    Bridge,
    Decoder,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Bridge => "bridge",
            Group::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub group: Group,
    pub tensor: Tensor,
}

/// Ordered collection of learnable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            group,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    /// 2-D conv kernel `[out, in, k, k]` with fan-in scaled normal init, plus
    /// a zero bias `[1, out, 1, 1]`.
    pub fn conv(
        &mut self,
        name: &str,
        group: Group,
        (out, inp, k): (usize, usize, usize),
        gain: f64,
        rng: &mut impl Rng,
    ) -> (ParamId, ParamId) {
        let std = (gain / (inp * k * k) as f64).sqrt();
        let w = self.add(format!("{name}.weight"), group, Tensor::randn([out, inp, k, k], std, rng));
        let b = self.add(format!("{name}.bias"), group, Tensor::zeros([1, out, 1, 1]));
        (w, b)
    }

    /// Fully connected `[in, out]` weight plus zero bias `[1, out]`.
    pub fn linear(
        &mut self,
        name: &str,
        group: Group,
        (inp, out): (usize, usize),
        gain: f64,
        rng: &mut impl Rng,
    ) -> (ParamId, ParamId) {
        let std = (gain / inp as f64).sqrt();
        let w = self.add(format!("{name}.weight"), group, Tensor::randn([inp, out], std, rng));
        let b = self.add(format!("{name}.bias"), group, Tensor::zeros([1, out]));
        (w, b)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &Entry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Entry] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Records every parameter as a tracked leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.entries.iter().map(|e| tape.param(e.tensor.clone())).collect())
    }

    /// Gradients of a bound store after backward, in store order.
    pub fn grads(&self, tape: &Tape, bound: &Bound) -> Vec<Tensor> {
        self.entries
            .iter()
            .zip(&bound.0)
            .map(|(e, v)| {
                tape.grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(e.tensor.shape().to_vec()))
            })
            .collect()
    }
}

/// Tape variables for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps variables already recorded in store order.
    pub fn new(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Convolution with bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub args: Conv2dArgs,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        dims: (usize, usize, usize),
        args: Conv2dArgs,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let (weight, bias) = store.conv(name, group, dims, gain, rng);
        Self { weight, bias, args }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, bound.var(self.weight), self.args)?;
        tape.add(y, bound.var(self.bias))
    }
}

/// Fully connected layer with bias.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        dims: (usize, usize),
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let (weight, bias) = store.linear(name, group, dims, gain, rng);
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        linear(tape, x, bound.var(self.weight), bound.var(self.bias))
    }

    pub fn vars(&self, bound: &Bound) -> (Var, Var) {
        (bound.var(self.weight), bound.var(self.bias))
    }
}
