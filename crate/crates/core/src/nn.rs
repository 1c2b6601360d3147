//! Parameters, graph binding and the small layer vocabulary used by the model.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Checkpoint, Gradients, Padding, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub trainable: bool,
}

/// Every parameter of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param {
            name,
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

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// `(trainable, total)` scalar counts.
    pub fn counts(&self) -> (usize, usize) {
        let total = self.params.iter().map(|p| p.value.len()).sum();
        let trainable = self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum();
        (trainable, total)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for p in &self.params {
            ck.push(p.name.clone(), &p.value);
        }
        ck
    }

    /// Checkpoint restricted to parameters with the given trainability.
    pub fn subset_checkpoint(&self, trainable: bool) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for p in self.params.iter().filter(|p| p.trainable == trainable) {
            ck.push(p.name.clone(), &p.value);
        }
        ck
    }

    /// Overwrites the parameters whose names start with one of `prefixes`
    /// from `ck`, which must hold each of them with the same shape.
    pub fn load_prefixed(&mut self, ck: &Checkpoint, prefixes: &[&str]) -> Result<()> {
        let mut problems = Vec::new();
        for p in &mut self.params {
            if !prefixes.iter().any(|pre| p.name.starts_with(pre)) {
                continue;
            }
            match ck.get(&p.name) {
                Some(t) if t.shape() == p.value.shape() => p.value = t.cast(),
                Some(t) => problems.push(format!(
                    "  {}: checkpoint {:?} vs model {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )),
                None => problems.push(format!("  {}: missing from checkpoint", p.name)),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::CheckpointMismatch(problems.join("\n")))
        }
    }

    /// Overwrites every parameter from `ck`. Fails, listing every offending
    /// tensor, if names or shapes disagree.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let mut problems = Vec::new();
        for p in &self.params {
            match ck.get(&p.name) {
                None => problems.push(format!("  {}: missing from checkpoint", p.name)),
                Some(t) if t.shape() != p.value.shape() => problems.push(format!(
                    "  {}: checkpoint {:?} vs model {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )),
                Some(_) => {}
            }
        }
        for (name, _) in &ck.tensors {
            if self.find(name).is_none() {
                problems.push(format!("  {name}: not a model parameter"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::CheckpointMismatch(problems.join("\n")));
        }
        for p in &mut self.params {
            p.value = ck.get(&p.name).expect("checked above").cast();
        }
        Ok(())
    }
}

/// Allocates named, initialised parameters under a common prefix.
pub struct ParamBuilder<'a, S> {
    store: &'a mut ParamStore<S>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    trainable: bool,
}

impl<'a, S: Scalar> ParamBuilder<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, rng: &'a mut ChaCha8Rng, prefix: &str, trainable: bool) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.to_string(),
            trainable,
        }
    }

    /// Child builder with `.name` appended to the prefix.
    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, S> {
        let prefix = self.full_name(name);
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
            trainable: self.trainable,
        }
    }

    pub fn with_trainable(&mut self, name: &str, trainable: bool) -> ParamBuilder<'_, S> {
        let mut b = self.sub(name);
        b.trainable = trainable;
        b
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| S::of(rng.sample::<f64, _>(StandardNormal) * std));
        self.store.add(self.full_name(name), t, self.trainable)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let t = Tensor::full(shape.to_vec(), S::of(value));
        self.store.add(self.full_name(name), t, self.trainable)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.constant(name, shape, 0.0)
    }
}

/// A tape plus the parameter bindings of one forward/backward pass.
///
/// Each parameter becomes a single leaf the first time it is used, so
/// gradients from every sample in a batch accumulate on that leaf.
pub struct Graph<'p, S> {
    tape: Tape<S>,
    params: &'p ParamStore<S>,
    bound: Vec<Option<Var>>,
}

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Self::with_tape(params, Tape::new())
    }

    /// Graph whose tape records nothing; used for evaluation.
    pub fn inference(params: &'p ParamStore<S>) -> Self {
        Self::with_tape(params, Tape::inference())
    }

    pub fn with_tape(params: &'p ParamStore<S>, tape: Tape<S>) -> Self {
        Self {
            tape,
            params,
            bound: vec![None; params.len()],
        }
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let p = self.params.get(id);
        let v = self.tape.leaf(p.value.clone(), p.trainable)?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor<S>) -> Result<Var> {
        self.tape.constant(t)
    }

    /// Var bound to `id`, if the parameter was used in this graph.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Gradient for every bound trainable parameter.
    pub fn param_grads(&self, grads: &Gradients<S>) -> Vec<(ParamId, Tensor<S>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                grads.get(v).map(|g| (ParamId(i), g.clone()))
            })
            .collect()
    }
}

impl<S> Deref for Graph<'_, S> {
    type Target = Tape<S>;

    fn deref(&self) -> &Tape<S> {
        &self.tape
    }
}

impl<S> DerefMut for Graph<'_, S> {
    fn deref_mut(&mut self) -> &mut Tape<S> {
        &mut self.tape
    }
}

/// `x · W + b` on row-major `[n, in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<S: Scalar>(b: &mut ParamBuilder<'_, S>, input: usize, output: usize) -> Self {
        Self {
            weight: b.normal("weight", &[input, output], 1.0 / (input as f64).sqrt()),
            bias: Some(b.zeros("bias", &[output])),
        }
    }

    /// Linear layer whose weight starts at zero.
    pub fn zero_init<S: Scalar>(b: &mut ParamBuilder<'_, S>, input: usize, output: usize) -> Self {
        Self {
            weight: b.zeros("weight", &[input, output]),
            bias: Some(b.zeros("bias", &[output])),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b)?;
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Feed-forward stack with ReLU between layers (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<S: Scalar>(b: &mut ParamBuilder<'_, S>, widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut b.sub(&format!("fc{i}")), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x)?;
            if i < last {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }
}

/// Layer normalisation over the last axis with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(b: &mut ParamBuilder<'_, S>, width: usize) -> Self {
        Self {
            gain: b.constant("gain", &[width], 1.0),
            shift: b.zeros("shift", &[width]),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let axis = g.shape(x).len() - 1;
        let n = g.layer_norm(x, axis, 1e-5)?;
        let gain = g.param(self.gain)?;
        let shift = g.param(self.shift)?;
        let y = g.mul(n, gain)?;
        g.add(y, shift)
    }
}

/// Stride-1 convolution over `[C,H,W]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: Padding,
}

impl Conv2d {
    pub fn new<S: Scalar>(b: &mut ParamBuilder<'_, S>, input: usize, output: usize, kernel: usize) -> Self {
        let fan_in = (input * kernel * kernel) as f64;
        Self {
            weight: b.normal("weight", &[output, input, kernel, kernel], (2.0 / fan_in).sqrt()),
            bias: b.zeros("bias", &[output]),
            padding: Padding::Same,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        g.conv2d(x, w, Some(b), self.padding)
    }
}

/// Kernel-2, stride-2 transposed convolution: a per-pixel linear map to
/// `4·out` channels followed by a factor-2 depth-to-space.
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2 {
    pub proj: Linear,
    pub output: usize,
}

impl ConvTranspose2x2 {
    pub fn new<S: Scalar>(b: &mut ParamBuilder<'_, S>, input: usize, output: usize) -> Self {
        Self {
            proj: Linear::new(b, input, output * 4),
            output,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let flat = g.reshape(x, [c, h * w])?;
        let rows = g.transpose(flat)?;
        let y = self.proj.forward(g, rows)?;
        let y = g.transpose(y)?;
        let y = g.reshape(y, [self.output * 4, h, w])?;
        g.depth_to_space(y, 2)
    }
}

/// Multi-head attention with input and output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<S: Scalar>(b: &mut ParamBuilder<'_, S>, width: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(&mut b.sub("q"), width, width),
            k: Linear::new(&mut b.sub("k"), width, width),
            v: Linear::new(&mut b.sub("v"), width, width),
            out: Linear::new(&mut b.sub("out"), width, width),
            heads,
        }
    }

    /// Returns the projected output and the raw attention node (for saved probabilities).
    pub fn forward_traced<S: Scalar>(&self, g: &mut Graph<'_, S>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let q = self.q.forward(g, q)?;
        let k = self.k.forward(g, k)?;
        let v = self.v.forward(g, v)?;
        let a = g.attention(q, k, v, self.heads)?;
        Ok((self.out.forward(g, a)?, a))
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, q: Var, k: Var, v: Var) -> Result<Var> {
        Ok(self.forward_traced(g, q, k, v)?.0)
    }
}

/// Seed derivation shared by everything that needs an independent stream.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    // FNV-1a over the stream tag, mixed with the seed through splitmix64.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
