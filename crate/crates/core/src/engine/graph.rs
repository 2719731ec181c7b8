use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::exec::{for_each_row, for_each_row_pair, ExecMode};
use crate::engine::ops::{self, ConvDims, PoolDims};
use crate::engine::scalar::{gemm, pairwise_row_sum, Layout};
use crate::engine::{Scalar, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;
pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input { slot: usize },
    Conv2d { input: NodeId, kernel: ParamId, bias: ParamId },
    MaxPool { input: NodeId, size: usize },
    Relu { input: NodeId },
    Dense { input: NodeId, weight: ParamId, bias: ParamId },
    Concat { inputs: Vec<NodeId> },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } => vec![],
            Op::Conv2d { input, .. } | Op::MaxPool { input, .. } | Op::Relu { input } | Op::Dense { input, .. } => {
                vec![*input]
            }
            Op::Concat { inputs } => inputs.clone(),
        }
    }

    fn params(&self) -> Vec<ParamId> {
        match self {
            Op::Conv2d { kernel, bias, .. } => vec![*kernel, *bias],
            Op::Dense { weight, bias, .. } => vec![*weight, *bias],
            _ => vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    /// Per-sample output shape.
    pub shape: Vec<usize>,
}

impl Node {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A named trainable tensor with its gradient and momentum buffers.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub velocity: Tensor<T>,
    /// Frozen parameters keep a zero gradient and are skipped by the optimizer.
    pub trainable: bool,
    /// Weight decay applies to weights, not biases.
    pub decay: bool,
}

impl<T: Scalar> Param<T> {
    fn new(name: String, value: Tensor<T>, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        Param {
            name,
            value,
            grad,
            velocity,
            trainable: true,
            decay,
        }
    }
}

#[derive(Debug, Clone)]
struct ForwardState<T> {
    batch: usize,
    values: Vec<Tensor<T>>,
    argmax: Vec<Vec<u32>>,
}

/// Feed-forward computation graph over batches. Nodes are stored in
/// topological order; every value carries a leading batch axis.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node>,
    params: Vec<Param<T>>,
    inputs: Vec<NodeId>,
    output: NodeId,
    mode: ExecMode,
    state: Option<ForwardState<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn input_shapes(&self) -> Vec<&[usize]> {
        self.inputs.iter().map(|&i| self.nodes[i].shape.as_slice()).collect()
    }

    pub fn output_len(&self) -> usize {
        self.nodes[self.output].len()
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: ExecMode) {
        self.mode = mode;
    }

    /// Marks a parameter frozen (or trainable again).
    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self
            .param_mut(name)
            .ok_or_else(|| Error::invalid("set_trainable", format!("no parameter `{name}`")))?;
        p.trainable = trainable;
        Ok(())
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Value of a node from the last stateful forward pass.
    pub fn value(&self, name: &str) -> Option<&Tensor<T>> {
        let id = self.node_id(name)?;
        self.state.as_ref().map(|s| &s.values[id])
    }

    /// Forward pass that keeps activations for a following `backward`.
    pub fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<&Tensor<T>> {
        let state = self.run(inputs)?;
        self.state = Some(state);
        let state = self.state.as_ref().expect("state just stored");
        Ok(&state.values[self.output])
    }

    /// Stateless forward pass. Safe to call concurrently on a shared graph.
    pub fn eval(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let mut state = self.run(inputs)?;
        Ok(state.values.swap_remove(self.output))
    }

    fn run(&self, inputs: &[&Tensor<T>]) -> Result<ForwardState<T>> {
        if inputs.len() != self.inputs.len() {
            return Err(Error::shape("forward", "input count", self.inputs.len(), inputs.len()));
        }
        let batch = inputs[0].shape().first().copied().unwrap_or(0);
        for (slot, (&id, t)) in self.inputs.iter().zip(inputs).enumerate() {
            let node = &self.nodes[id];
            let mut expect = vec![batch];
            expect.extend_from_slice(&node.shape);
            if t.shape() != expect.as_slice() {
                return Err(Error::invalid(
                    "forward",
                    format!("input {slot} (`{}`) has shape {:?}, expected {:?}", node.name, t.shape(), expect),
                ));
            }
        }
        let mode = self.mode;
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut argmax: Vec<Vec<u32>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let mut out_shape = vec![batch];
            out_shape.extend_from_slice(&node.shape);
            let mut arg = Vec::new();
            let value = match &node.op {
                Op::Input { slot } => inputs[*slot].clone(),
                Op::Conv2d { input, kernel, bias } => {
                    let x = &values[*input];
                    let d = conv_dims(&self.nodes[*input].shape, &self.params[*kernel].value);
                    let k = self.params[*kernel].value.data();
                    let b = self.params[*bias].value.data();
                    let mut out = vec![T::zero(); batch * d.out_len()];
                    for_each_row(mode, &mut out, d.out_len(), Vec::new, |i, o, col| {
                        ops::conv_forward_sample(x.row(i), &d, k, b, o, col);
                    });
                    Tensor::new(&out_shape, out)?
                }
                Op::MaxPool { input, size } => {
                    let x = &values[*input];
                    let s = &self.nodes[*input].shape;
                    let d = PoolDims {
                        channels: s[0],
                        height: s[1],
                        width: s[2],
                        size: *size,
                    };
                    let per = node.len();
                    let mut data = vec![T::zero(); per * batch];
                    arg = vec![0u32; per * batch];
                    for_each_row_pair(mode, &mut data, per, &mut arg, per, || (), |i, o, a, _| {
                        ops::pool_forward_sample(x.row(i), &d, o, a);
                    });
                    Tensor::new(&out_shape, data)?
                }
                Op::Relu { input } => values[*input].map(|v| if v > T::zero() { v } else { T::zero() }),
                Op::Dense { input, weight, bias } => {
                    let x = &values[*input];
                    let w = &self.params[*weight].value;
                    let b = self.params[*bias].value.data();
                    let (m, n) = (w.shape()[0], w.shape()[1]);
                    let mut out = Vec::with_capacity(batch * m);
                    for _ in 0..batch {
                        out.extend_from_slice(b);
                    }
                    gemm(batch, n, m, T::one(), x.data(), Layout::Normal, w.data(), Layout::Transposed, T::one(), &mut out);
                    Tensor::new(&out_shape, out)?
                }
                Op::Concat { inputs } => {
                    let mut data = Vec::with_capacity(batch * node.len());
                    for i in 0..batch {
                        for &src in inputs {
                            data.extend_from_slice(values[src].row(i));
                        }
                    }
                    Tensor::new(&out_shape, data)?
                }
            };
            values.push(value);
            argmax.push(arg);
        }
        Ok(ForwardState { batch, values, argmax })
    }

    /// Back-propagates `seed` (the loss gradient w.r.t. the graph output) and
    /// overwrites every parameter gradient with d(loss)/d(param). Frozen
    /// parameters get a zero gradient.
    pub fn backward(&mut self, seed: &Tensor<T>) -> Result<()> {
        let state = self.state.take().ok_or(Error::BackwardBeforeForward)?;
        let result = self.backward_with(&state, seed);
        self.state = Some(state);
        result
    }

    fn requires_grad(&self) -> Vec<bool> {
        let mut req = vec![false; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            req[id] = node.op.params().iter().any(|&p| self.params[p].trainable)
                || node.op.inputs().iter().any(|&i| req[i]);
        }
        req
    }

    fn backward_with(&mut self, state: &ForwardState<T>, seed: &Tensor<T>) -> Result<()> {
        let out_val = &state.values[self.output];
        if seed.shape() != out_val.shape() {
            return Err(Error::invalid(
                "backward",
                format!("seed shape {:?} differs from output {:?}", seed.shape(), out_val.shape()),
            ));
        }
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
        let req = self.requires_grad();
        let batch = state.batch;
        let mode = self.mode;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[self.output] = Some(seed.clone());

        for id in (0..self.nodes.len()).rev() {
            if !req[id] {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let mut routed: Vec<(NodeId, Tensor<T>)> = Vec::new();
            match &node.op {
                Op::Input { .. } => {}
                Op::Conv2d { input, kernel, bias } => {
                    let x = &state.values[*input];
                    let d = conv_dims(&self.nodes[*input].shape, &self.params[*kernel].value);
                    let want_dx = req[*input];
                    let klen = self.params[*kernel].value.len();
                    let flen = d.filters;
                    let k = self.params[*kernel].value.data();
                    let mut rows = vec![T::zero(); batch * (klen + flen)];
                    let mut dxs = Vec::new();
                    if want_dx {
                        dxs = vec![T::zero(); batch * d.in_len()];
                        for_each_row_pair(mode, &mut rows, klen + flen, &mut dxs, d.in_len(), Vec::new, |i, dk, dx, col| {
                            let (dkk, dbb) = dk.split_at_mut(klen);
                            ops::conv_backward_sample(x.row(i), &d, k, dy.row(i), dkk, dbb, Some(dx), col);
                        });
                    } else {
                        for_each_row(mode, &mut rows, klen + flen, Vec::new, |i, dk, col| {
                            let (dkk, dbb) = dk.split_at_mut(klen);
                            ops::conv_backward_sample(x.row(i), &d, k, dy.row(i), dkk, dbb, None, col);
                        });
                    }
                    let mut total = vec![T::zero(); klen + flen];
                    pairwise_row_sum(&rows, batch, &mut total);
                    if self.params[*kernel].trainable {
                        self.params[*kernel].grad.data_mut().copy_from_slice(&total[..klen]);
                    }
                    if self.params[*bias].trainable {
                        self.params[*bias].grad.data_mut().copy_from_slice(&total[klen..]);
                    }
                    if want_dx {
                        routed.push((*input, Tensor::new(x.shape(), dxs)?));
                    }
                }
                Op::MaxPool { input, .. } => {
                    if req[*input] {
                        let x = &state.values[*input];
                        let arg = &state.argmax[id];
                        let per_in = x.row_len();
                        let per_out = node.len();
                        let mut dx = vec![T::zero(); batch * per_in];
                        for_each_row(mode, &mut dx, per_in, || (), |i, row, _| {
                            ops::pool_backward_sample(dy.row(i), &arg[i * per_out..(i + 1) * per_out], row);
                        });
                        routed.push((*input, Tensor::new(x.shape(), dx)?));
                    }
                }
                Op::Relu { input } => {
                    if req[*input] {
                        let x = &state.values[*input];
                        let data = x
                            .data()
                            .iter()
                            .zip(dy.data())
                            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                            .collect();
                        routed.push((*input, Tensor::new(x.shape(), data)?));
                    }
                }
                Op::Dense { input, weight, bias } => {
                    let x = &state.values[*input];
                    let (m, n) = {
                        let s = self.params[*weight].value.shape();
                        (s[0], s[1])
                    };
                    if self.params[*weight].trainable {
                        let g = self.params[*weight].grad.data_mut();
                        gemm(m, batch, n, T::one(), dy.data(), Layout::Transposed, x.data(), Layout::Normal, T::zero(), g);
                    }
                    if self.params[*bias].trainable {
                        let g = self.params[*bias].grad.data_mut();
                        for i in 0..batch {
                            for (gj, &d) in g.iter_mut().zip(dy.row(i)) {
                                *gj = *gj + d;
                            }
                        }
                    }
                    if req[*input] {
                        let mut dx = vec![T::zero(); batch * n];
                        let w = self.params[*weight].value.data();
                        gemm(batch, m, n, T::one(), dy.data(), Layout::Normal, w, Layout::Normal, T::zero(), &mut dx);
                        routed.push((*input, Tensor::new(x.shape(), dx)?));
                    }
                }
                Op::Concat { inputs } => {
                    let mut offset = 0;
                    for &src in inputs {
                        let len = self.nodes[src].len();
                        if req[src] {
                            let mut data = Vec::with_capacity(batch * len);
                            for i in 0..batch {
                                data.extend_from_slice(&dy.row(i)[offset..offset + len]);
                            }
                            routed.push((src, Tensor::new(state.values[src].shape(), data)?));
                        }
                        offset += len;
                    }
                }
            }
            for (src, g) in routed {
                match &mut grads[src] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn conv_dims<T: Scalar>(in_shape: &[usize], kernel: &Tensor<T>) -> ConvDims {
    let k = kernel.shape();
    ConvDims {
        channels: in_shape[0],
        height: in_shape[1],
        width: in_shape[2],
        filters: k[0],
        kh: k[2],
        kw: k[3],
    }
}

/// Incrementally assembles a [`Graph`], validating shapes layer by layer and
/// drawing initial weights from a seeded generator: uniform in
/// `±sqrt(6 / (fan_in + fan_out))`, biases zero.
pub struct GraphBuilder<T> {
    nodes: Vec<Node>,
    params: Vec<Param<T>>,
    inputs: Vec<NodeId>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> GraphBuilder<T> {
    pub fn new(seed: u64) -> Self {
        GraphBuilder {
            nodes: Vec::new(),
            params: Vec::new(),
            inputs: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn push(&mut self, name: impl Into<String>, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node {
            name: name.into(),
            op,
            shape,
        });
        self.nodes.len() - 1
    }

    fn init_param(&mut self, name: String, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut self.rng;
        let value = Tensor::from_fn(shape, |_| T::from_real(rng.random_range(-limit..=limit)));
        self.params.push(Param::new(name, value, true));
        self.params.len() - 1
    }

    fn zero_bias(&mut self, name: String, len: usize) -> ParamId {
        self.params.push(Param::new(name, Tensor::zeros(&[len]), false));
        self.params.len() - 1
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Declares the next graph input with per-sample shape `[C,H,W]` or `[n]`.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let slot = self.inputs.len();
        let id = self.push(name, Op::Input { slot }, shape.to_vec());
        self.inputs.push(id);
        id
    }

    pub fn conv2d(&mut self, name: &str, x: NodeId, filters: usize, kh: usize, kw: usize) -> Result<NodeId> {
        let s = self.nodes[x].shape.clone();
        if s.len() != 3 {
            return Err(layer_err(name, format!("expects a [C,H,W] input, got {s:?}")));
        }
        if filters == 0 || kh == 0 || kw == 0 {
            return Err(layer_err(name, "filters and kernel extents must be positive"));
        }
        if kh > s[1] || kw > s[2] {
            return Err(layer_err(name, format!("kernel {kh}x{kw} exceeds input {}x{}", s[1], s[2])));
        }
        let kernel = self.init_param(
            format!("{name}.weight"),
            &[filters, s[0], kh, kw],
            s[0] * kh * kw,
            filters * kh * kw,
        );
        let bias = self.zero_bias(format!("{name}.bias"), filters);
        let shape = vec![filters, s[1] - kh + 1, s[2] - kw + 1];
        Ok(self.push(name, Op::Conv2d { input: x, kernel, bias }, shape))
    }

    pub fn maxpool(&mut self, name: &str, x: NodeId, size: usize) -> Result<NodeId> {
        let s = self.nodes[x].shape.clone();
        if s.len() != 3 {
            return Err(layer_err(name, format!("expects a [C,H,W] input, got {s:?}")));
        }
        if size == 0 || size > s[1] || size > s[2] {
            return Err(layer_err(
                name,
                format!("pooling size {size} collapses spatial extent {}x{}", s[1], s[2]),
            ));
        }
        Ok(self.push(name, Op::MaxPool { input: x, size }, vec![s[0], s[1] / size, s[2] / size]))
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> NodeId {
        let shape = self.nodes[x].shape.clone();
        self.push(name, Op::Relu { input: x }, shape)
    }

    pub fn dense(&mut self, name: &str, x: NodeId, width: usize) -> Result<NodeId> {
        if width == 0 {
            return Err(layer_err(name, "width must be positive"));
        }
        let n = self.nodes[x].len();
        let weight = self.init_param(format!("{name}.weight"), &[width, n], n, width);
        let bias = self.zero_bias(format!("{name}.bias"), width);
        Ok(self.push(name, Op::Dense { input: x, weight, bias }, vec![width]))
    }

    /// Flattens and concatenates per-sample values.
    pub fn concat(&mut self, name: &str, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(layer_err(name, "nothing to concatenate"));
        }
        let len = xs.iter().map(|&x| self.nodes[x].len()).sum();
        Ok(self.push(name, Op::Concat { inputs: xs.to_vec() }, vec![len]))
    }

    pub fn build(self, output: NodeId) -> Graph<T> {
        Graph {
            nodes: self.nodes,
            params: self.params,
            inputs: self.inputs,
            output,
            mode: ExecMode::default(),
            state: None,
        }
    }
}

fn layer_err(layer: &str, msg: impl Into<String>) -> Error {
    Error::InvalidLayer {
        layer: layer.to_string(),
        msg: msg.into(),
    }
}
