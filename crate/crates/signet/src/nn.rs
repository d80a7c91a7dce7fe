//! Named parameter storage and the small layer vocabulary the network is
//! built from: convolutions with reflect padding, dense maps, channel
//! attention, residual blocks and groups.
//!
//! Parameters live in a [`ParamStore`] in registration order (which is
//! deterministic), get bound to a tape as leaves once per forward pass, and
//! are updated in place by the optimizer.

use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Init gain for the closing convolution of multiplicative branches (the
/// spectrum gate, feature merges, the degradation head). Keeps products of
/// freshly initialized features near the input scale so the documented
/// learning rate is usable from step one.
pub const TAIL_GAIN: f64 = 0.1;

/// Index of a parameter inside its store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter())
    }

    /// Total number of scalar parameters.
    pub fn count_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Binds every parameter to `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }
}

/// Per-tape binding of a [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Registration helper carrying the store, the init rng, and a name prefix.
pub struct ParamReg<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

impl<'a> ParamReg<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        ParamReg { store, rng }
    }

    /// Kaiming-uniform weights: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        self.kaiming_scaled(name, shape, fan_in, 1.0)
    }

    /// Kaiming-uniform weights with the bound multiplied by `gain`; small
    /// gains keep deep multiplicative branches near the input scale early
    /// in training.
    pub fn kaiming_scaled(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> ParamId {
        let bound = gain * (6.0 / fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng.range(-bound, bound));
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, value))
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// 2-D convolution with reflect padding (same resolution) and bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pad: usize,
}

impl Conv2d {
    pub fn new(reg: &mut ParamReg, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Conv2d::with_gain(reg, name, cin, cout, k, 1.0)
    }

    pub fn with_gain(
        reg: &mut ParamReg,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        gain: f64,
    ) -> Self {
        let w = reg.kaiming_scaled(&format!("{name}.w"), &[cout, cin, k, k], cin * k * k, gain);
        let b = reg.zeros(&format!("{name}.b"), &[cout]);
        Conv2d { w, b, pad: k / 2 }
    }

    /// Zero-initialized variant for heads that must start as the identity
    /// of a residual path.
    pub fn new_zeroed(reg: &mut ParamReg, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let w = reg.zeros(&format!("{name}.w"), &[cout, cin, k, k]);
        let b = reg.zeros(&format!("{name}.b"), &[cout]);
        Conv2d { w, b, pad: k / 2 }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let padded = tape.pad_reflect(x, self.pad);
        let conv = tape.conv2d_valid(padded, bound.var(self.w));
        tape.add_bias_chw(conv, bound.var(self.b))
    }
}

/// Dense map on (R, K) matrices; bias optional.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Dense {
    pub fn new(reg: &mut ParamReg, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let w = reg.kaiming(&format!("{name}.w"), &[fan_in, fan_out], fan_in);
        let b = bias.then(|| reg.zeros(&format!("{name}.b"), &[fan_out]));
        Dense { w, b }
    }

    pub fn new_zeroed(reg: &mut ParamReg, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let w = reg.zeros(&format!("{name}.w"), &[fan_in, fan_out]);
        let b = bias.then(|| reg.zeros(&format!("{name}.b"), &[fan_out]));
        Dense { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let m = tape.matmul(x, bound.var(self.w));
        match self.b {
            Some(b) => tape.add_bias_rows(m, bound.var(b)),
            None => m,
        }
    }
}

/// Squeeze-and-excite style channel attention: GAP -> dense -> ReLU ->
/// dense -> sigmoid -> per-channel rescale.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    down: Dense,
    up: Dense,
}

impl ChannelAttention {
    pub fn new(reg: &mut ParamReg, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        ChannelAttention {
            down: Dense::new(reg, &format!("{name}.down"), channels, hidden, true),
            up: Dense::new(reg, &format!("{name}.up"), hidden, channels, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let (c, _, _) = tape.value(x).dims3();
        let pooled = tape.gap(x);
        let row = tape.reshape(pooled, &[1, c]);
        let d = self.down.forward(tape, bound, row);
        let d = tape.relu(d);
        let u = self.up.forward(tape, bound, d);
        let gate = tape.sigmoid(u);
        let gate = tape.reshape(gate, &[c]);
        tape.mul_channel(x, gate)
    }
}

/// conv -> ReLU -> conv -> channel attention, plus the skip.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    attention: ChannelAttention,
}

impl ResidualBlock {
    pub fn new(reg: &mut ParamReg, name: &str, channels: usize, k: usize, reduction: usize) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(reg, &format!("{name}.conv1"), channels, channels, k),
            conv2: Conv2d::new(reg, &format!("{name}.conv2"), channels, channels, k),
            attention: ChannelAttention::new(reg, &format!("{name}.ca"), channels, reduction),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let h = self.conv1.forward(tape, bound, x);
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, bound, h);
        let h = self.attention.forward(tape, bound, h);
        tape.add(x, h)
    }
}

/// A stack of residual blocks with a trailing conv and a group-level skip.
#[derive(Clone, Debug)]
pub struct ResidualGroup {
    blocks: Vec<ResidualBlock>,
    tail: Conv2d,
}

impl ResidualGroup {
    pub fn new(
        reg: &mut ParamReg,
        name: &str,
        channels: usize,
        blocks: usize,
        k: usize,
        reduction: usize,
    ) -> Self {
        ResidualGroup {
            blocks: (0..blocks)
                .map(|i| ResidualBlock::new(reg, &format!("{name}.block{i}"), channels, k, reduction))
                .collect(),
            tail: Conv2d::new(reg, &format!("{name}.tail"), channels, channels, k),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(tape, bound, h);
        }
        let h = self.tail.forward(tape, bound, h);
        tape.add(x, h)
    }
}
