//! Feed-forward layer graph with explicit forward and backward passes.
//!
//! A [`Model`] is a static DAG of nodes. Node 0 is the input; every other
//! node applies one layer to the outputs of earlier nodes, and the last node
//! produces the logits. Trainable tensors live in a flat registry of
//! [`ParamNode`]s that layers refer to by index.

pub mod batchnorm;
pub mod loss;
mod two_branch;

use serde::{Deserialize, Serialize};

pub use two_branch::TwoBranchReluNet;

use crate::error::{Error, Result};
use crate::init::{xavier_init, RngStream};
use crate::tensor::{self, Shape, Tensor};
use batchnorm::{BnCache, RunningStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    ConvKernel,
    ConvBias,
    DenseWeight,
    DenseBias,
    BnGamma,
    BnBeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamNode {
    pub id: usize,
    pub role: ParamRole,
    pub value: Tensor,
    pub grad: Tensor,
}

impl ParamNode {
    fn new(id: usize, role: ParamRole, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().clone());
        ParamNode {
            id,
            role,
            value,
            grad,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    Dense {
        units: usize,
    },
    Flatten,
    AvgPool {
        size: usize,
        stride: usize,
    },
    /// Average over the whole spatial extent, giving `[N, C, 1, 1]`.
    GlobalAvgPool,
    Batchnorm,
    Concat,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Input,
    Conv2d {
        kernel: usize,
        bias: usize,
        stride: usize,
    },
    Relu,
    Dense {
        weight: usize,
        bias: usize,
    },
    Flatten,
    AvgPool {
        size_h: usize,
        size_w: usize,
        stride: usize,
    },
    Batchnorm {
        gamma: usize,
        beta: usize,
        running: RunningStats,
    },
    Concat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub layer: Layer,
    pub inputs: Vec<usize>,
    /// Output dims without the batch axis.
    pub out_dims: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One convolutional filter: output channel `filter_index` of the conv layer at node `layer_id`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterGroup {
    pub layer_id: usize,
    pub filter_index: usize,
    pub kernel_param: usize,
    pub bias_param: usize,
    pub kernel_slice: std::ops::Range<usize>,
    pub bias_index: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub mode: Mode,
    /// Output of every node; index 0 is the model input.
    pub activations: Vec<Tensor>,
    bn: Vec<Option<BnCache>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Tensor {
        self.activations.last().expect("model has nodes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    nodes: Vec<Node>,
    params: Vec<ParamNode>,
}

impl Model {
    pub fn builder(input_dims: &[usize]) -> ModelBuilder {
        ModelBuilder {
            model: Model {
                nodes: vec![Node {
                    layer: Layer::Input,
                    inputs: vec![],
                    out_dims: input_dims.to_vec(),
                }],
                params: vec![],
            },
        }
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.nodes[0].out_dims
    }

    pub fn output_dims(&self) -> &[usize] {
        &self.nodes.last().expect("model has nodes").out_dims
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[ParamNode] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamNode] {
        &mut self.params
    }

    pub fn param(&self, id: usize) -> &ParamNode {
        &self.params[id]
    }

    pub fn param_mut(&mut self, id: usize) -> &mut ParamNode {
        &mut self.params[id]
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// One group per output channel of every conv layer, in (layer, filter) order.
    pub fn filter_groups(&self) -> Vec<FilterGroup> {
        let mut groups = Vec::new();
        for (layer_id, node) in self.nodes.iter().enumerate() {
            if let Layer::Conv2d { kernel, bias, .. } = node.layer {
                let dims = self.params[kernel].value.dims();
                let (k, c, kh, kw) = (dims[0], dims[1], dims[2], dims[3]);
                let slab = c * kh * kw;
                for f in 0..k {
                    groups.push(FilterGroup {
                        layer_id,
                        filter_index: f,
                        kernel_param: kernel,
                        bias_param: bias,
                        kernel_slice: f * slab..(f + 1) * slab,
                        bias_index: f,
                        fan_in: slab,
                        fan_out: k * kh * kw,
                    });
                }
            }
        }
        groups
    }

    pub fn has_batchnorm(&self) -> bool {
        self.nodes.iter().any(|n| matches!(n.layer, Layer::Batchnorm { .. }))
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<ForwardCache> {
        let (cache, stats) = self.run(input, mode)?;
        for (node, stat) in self.nodes.iter_mut().zip(stats) {
            if let (Layer::Batchnorm { running, .. }, Some(stat)) = (&mut node.layer, stat) {
                running.absorb(&stat);
            }
        }
        Ok(cache)
    }

    /// Eval-mode forward pass; never mutates the model.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let (mut cache, _) = self.run(input, Mode::Eval)?;
        Ok(cache.activations.pop().expect("model has nodes"))
    }

    #[allow(clippy::type_complexity)]
    fn run(&self, input: &Tensor, mode: Mode) -> Result<(ForwardCache, Vec<Option<batchnorm::BatchStats>>)> {
        let dims = input.dims();
        if dims.len() != self.input_dims().len() + 1 || &dims[1..] != self.input_dims() {
            return Err(Error::Layer {
                layer: 0,
                reason: format!(
                    "input shape {:?} does not match [N, {:?}]",
                    dims,
                    self.input_dims()
                ),
            });
        }
        let mut acts: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut bn = vec![None; self.nodes.len()];
        let mut stats = vec![None; self.nodes.len()];
        acts.push(input.clone());
        for (id, node) in self.nodes.iter().enumerate().skip(1) {
            let wrap = |e: Error| Error::Layer {
                layer: id,
                reason: e.to_string(),
            };
            let x = &acts[node.inputs[0]];
            let out = match &node.layer {
                Layer::Input => unreachable!("input node is only at index 0"),
                Layer::Conv2d { kernel, bias, stride } => tensor::conv2d_forward(
                    x,
                    &self.params[*kernel].value,
                    &self.params[*bias].value,
                    *stride,
                )
                .map_err(wrap)?,
                Layer::Relu => {
                    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                    Tensor::from_vec(x.shape().clone(), data).map_err(wrap)?
                }
                Layer::Dense { weight, bias } => {
                    let mut y = tensor::matmul(x, &self.params[*weight].value).map_err(wrap)?;
                    let b = self.params[*bias].value.data();
                    for row in y.data_mut().chunks_exact_mut(b.len()) {
                        row.iter_mut().zip(b).for_each(|(r, bv)| *r += bv);
                    }
                    y
                }
                Layer::Flatten => {
                    let n = x.dims()[0];
                    x.clone().reshape(Shape::new(vec![n, x.len() / n]).map_err(wrap)?).map_err(wrap)?
                }
                Layer::AvgPool { size_h, size_w, stride } => avg_pool_forward(x, *size_h, *size_w, *stride),
                Layer::Batchnorm { gamma, beta, running } => {
                    let (g, b) = (&self.params[*gamma].value, &self.params[*beta].value);
                    match mode {
                        Mode::Train => {
                            let (y, cache, stat) = batchnorm::forward_train(x, g, b).map_err(wrap)?;
                            bn[id] = Some(cache);
                            stats[id] = Some(stat);
                            y
                        }
                        Mode::Eval => batchnorm::forward_eval(x, g, b, running).map_err(wrap)?,
                    }
                }
                Layer::Concat => {
                    let parts: Vec<&Tensor> = node.inputs.iter().map(|&i| &acts[i]).collect();
                    concat_channels(&parts)
                }
            };
            acts.push(out);
        }
        Ok((
            ForwardCache {
                mode,
                activations: acts,
                bn,
            },
            stats,
        ))
    }

    /// Mean softmax cross-entropy of the cached logits; accumulates `dL/dw` into every `ParamNode::grad`.
    pub fn backward(&mut self, cache: &ForwardCache, labels: &[usize]) -> Result<f64> {
        let (loss, dlogits) = loss::softmax_cross_entropy(cache.logits(), labels)?;
        self.backward_from(cache, dlogits)?;
        Ok(loss)
    }

    /// Backpropagates an arbitrary output gradient through the graph; returns the input gradient.
    pub fn backward_from(&mut self, cache: &ForwardCache, grad_output: Tensor) -> Result<Tensor> {
        if cache.mode != Mode::Train && self.has_batchnorm() {
            return Err(Error::Layer {
                layer: 0,
                reason: "backward requires a train-mode forward pass".into(),
            });
        }
        let acts = &cache.activations;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        *grads.last_mut().expect("model has nodes") = Some(grad_output);

        for id in (1..self.nodes.len()).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let x = &acts[node.inputs[0]];
            let wrap = |e: Error| Error::Layer {
                layer: id,
                reason: e.to_string(),
            };
            let input_grads: Vec<Tensor> = match &node.layer {
                Layer::Input => unreachable!(),
                Layer::Conv2d { kernel, bias, stride } => {
                    let g = tensor::conv2d_backward(x, &self.params[*kernel].value, &dy, *stride).map_err(wrap)?;
                    add_into(&mut self.params[*kernel].grad, &g.kernel);
                    add_into(&mut self.params[*bias].grad, &g.bias);
                    vec![g.input]
                }
                Layer::Relu => {
                    let data = dy
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                        .collect();
                    vec![Tensor::from_vec(x.shape().clone(), data).map_err(wrap)?]
                }
                Layer::Dense { weight, bias } => {
                    let dw = tensor::matmul(&x.transpose().map_err(wrap)?, &dy).map_err(wrap)?;
                    add_into(&mut self.params[*weight].grad, &dw);
                    let units = dy.dims()[1];
                    let db = self.params[*bias].grad.data_mut();
                    for row in dy.data().chunks_exact(units) {
                        db.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                    let wt = self.params[*weight].value.transpose().map_err(wrap)?;
                    vec![tensor::matmul(&dy, &wt).map_err(wrap)?]
                }
                Layer::Flatten => vec![dy.reshape(x.shape().clone()).map_err(wrap)?],
                Layer::AvgPool { size_h, size_w, stride } => {
                    vec![avg_pool_backward(x, &dy, *size_h, *size_w, *stride)]
                }
                Layer::Batchnorm { gamma, beta, .. } => {
                    let bn = cache.bn[id].as_ref().ok_or_else(|| Error::Layer {
                        layer: id,
                        reason: "missing batchnorm cache".into(),
                    })?;
                    let (dx, dg, db) = batchnorm::backward(&dy, &self.params[*gamma].value, bn).map_err(wrap)?;
                    let (gamma, beta) = (*gamma, *beta);
                    self.params[gamma].grad.data_mut().iter_mut().zip(dg).for_each(|(g, d)| *g += d);
                    self.params[beta].grad.data_mut().iter_mut().zip(db).for_each(|(g, d)| *g += d);
                    vec![dx]
                }
                Layer::Concat => {
                    let parts: Vec<&Tensor> = node.inputs.iter().map(|&i| &acts[i]).collect();
                    split_channels(&dy, &parts)
                }
            };
            let inputs = self.nodes[id].inputs.clone();
            for (src, g) in inputs.into_iter().zip(input_grads) {
                match &mut grads[src] {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(grads[0].take().unwrap_or_else(|| Tensor::zeros(acts[0].shape().clone())))
    }

    /// Mean cross-entropy without touching gradients or running statistics.
    pub fn loss(&self, input: &Tensor, labels: &[usize], mode: Mode) -> Result<f64> {
        let (cache, _) = self.run(input, mode)?;
        Ok(loss::softmax_cross_entropy(cache.logits(), labels)?.0)
    }

    /// Convenience: zero grads, train-mode forward, backward. Returns `(loss, logits)`.
    pub fn loss_and_grads(&mut self, input: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        self.zero_grads();
        let cache = self.forward(input, Mode::Train)?;
        let loss = self.backward(&cache, labels)?;
        Ok((loss, cache.activations.last().cloned().expect("model has nodes")))
    }
}

fn add_into(acc: &mut Tensor, g: &Tensor) {
    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
}

fn avg_pool_forward(x: &Tensor, size_h: usize, size_w: usize, stride: usize) -> Tensor {
    let d = x.dims();
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    let (oh, ow) = ((h - size_h) / stride + 1, (w - size_w) / stride + 1);
    let scale = 1.0 / (size_h * size_w) as f64;
    let mut out = Tensor::zeros(Shape::new(vec![n, c, oh, ow]).expect("positive dims"));
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = 0.0;
                for u in 0..size_h {
                    let row = plane * h * w + (i * stride + u) * w + j * stride;
                    s += src[row..row + size_w].iter().sum::<f64>();
                }
                dst[plane * oh * ow + i * ow + j] = s * scale;
            }
        }
    }
    out
}

fn avg_pool_backward(x: &Tensor, dy: &Tensor, size_h: usize, size_w: usize, stride: usize) -> Tensor {
    let d = x.dims();
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    let (oh, ow) = (dy.dims()[2], dy.dims()[3]);
    let scale = 1.0 / (size_h * size_w) as f64;
    let mut dx = Tensor::zeros(x.shape().clone());
    let dst = dx.data_mut();
    for plane in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let g = dy.data()[plane * oh * ow + i * ow + j] * scale;
                for u in 0..size_h {
                    let row = plane * h * w + (i * stride + u) * w + j * stride;
                    dst[row..row + size_w].iter_mut().for_each(|v| *v += g);
                }
            }
        }
    }
    dx
}

fn concat_channels(parts: &[&Tensor]) -> Tensor {
    let n = parts[0].dims()[0];
    let plane: usize = parts[0].dims()[2..].iter().product();
    let channels: usize = parts.iter().map(|p| p.dims()[1]).sum();
    let mut dims = parts[0].dims().to_vec();
    dims[1] = channels;
    let mut out = Vec::with_capacity(n * channels * plane);
    for b in 0..n {
        for p in parts {
            let chunk = p.dims()[1] * plane;
            out.extend_from_slice(&p.data()[b * chunk..(b + 1) * chunk]);
        }
    }
    Tensor::from_vec(Shape::new(dims).expect("positive dims"), out).expect("sizes agree")
}

fn split_channels(dy: &Tensor, parts: &[&Tensor]) -> Vec<Tensor> {
    let n = dy.dims()[0];
    let plane: usize = dy.dims()[2..].iter().product();
    let total = dy.dims()[1] * plane;
    let mut offset = 0;
    parts
        .iter()
        .map(|p| {
            let chunk = p.dims()[1] * plane;
            let mut data = Vec::with_capacity(n * chunk);
            for b in 0..n {
                data.extend_from_slice(&dy.data()[b * total + offset..][..chunk]);
            }
            offset += chunk;
            Tensor::from_vec(p.shape().clone(), data).expect("sizes agree")
        })
        .collect()
}

pub struct ModelBuilder {
    model: Model,
}

impl ModelBuilder {
    pub fn input(&self) -> usize {
        0
    }

    pub fn last(&self) -> usize {
        self.model.nodes.len() - 1
    }

    pub fn dims(&self, node: usize) -> &[usize] {
        &self.model.nodes[node].out_dims
    }

    fn add_param(&mut self, role: ParamRole, value: Tensor) -> usize {
        let id = self.model.params.len();
        self.model.params.push(ParamNode::new(id, role, value));
        id
    }

    fn push(&mut self, layer: Layer, inputs: Vec<usize>, out_dims: Vec<usize>) -> usize {
        self.model.nodes.push(Node {
            layer,
            inputs,
            out_dims,
        });
        self.last()
    }

    /// Appends `spec` reading from the most recently added node.
    pub fn then(&mut self, spec: LayerSpec, rng: &mut RngStream) -> Result<usize> {
        let last = self.last();
        self.add(spec, &[last], rng)
    }

    /// Appends a layer reading from `inputs`. Weights are Xavier-initialized from `rng`, biases start at zero.
    pub fn add(&mut self, spec: LayerSpec, inputs: &[usize], rng: &mut RngStream) -> Result<usize> {
        let id = self.model.nodes.len();
        let err = |reason: String| Error::Layer { layer: id, reason };
        if inputs.is_empty() || inputs.iter().any(|&i| i >= id) {
            return Err(err(format!("inputs {inputs:?} must refer to earlier nodes")));
        }
        if !matches!(spec, LayerSpec::Concat) && inputs.len() != 1 {
            return Err(err(format!("{spec:?} takes exactly one input")));
        }
        let in_dims = self.dims(inputs[0]).to_vec();
        let need_rank = |r: usize| {
            if in_dims.len() == r {
                Ok(())
            } else {
                Err(err(format!("{spec:?} expects rank-{r} input, got {in_dims:?}")))
            }
        };
        match spec {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
            } => {
                need_rank(3)?;
                let (c, h, w) = (in_dims[0], in_dims[1], in_dims[2]);
                if kernel == 0 || stride == 0 || out_channels == 0 || kernel > h || kernel > w {
                    return Err(err(format!("conv {kernel}x{kernel} does not fit input {in_dims:?}")));
                }
                let shape = Shape::new(vec![out_channels, c, kernel, kernel])?;
                let fan_in = c * kernel * kernel;
                let fan_out = out_channels * kernel * kernel;
                let k = self.add_param(ParamRole::ConvKernel, xavier_init(shape, fan_in, fan_out, rng));
                let b = self.add_param(ParamRole::ConvBias, Tensor::zeros(Shape::new(vec![out_channels])?));
                let out = vec![out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1];
                Ok(self.push(
                    Layer::Conv2d {
                        kernel: k,
                        bias: b,
                        stride,
                    },
                    inputs.to_vec(),
                    out,
                ))
            }
            LayerSpec::Relu => Ok(self.push(Layer::Relu, inputs.to_vec(), in_dims)),
            LayerSpec::Dense { units } => {
                need_rank(1)?;
                if units == 0 {
                    return Err(err("dense layer needs at least one unit".into()));
                }
                let shape = Shape::new(vec![in_dims[0], units])?;
                let w = self.add_param(ParamRole::DenseWeight, xavier_init(shape, in_dims[0], units, rng));
                let b = self.add_param(ParamRole::DenseBias, Tensor::zeros(Shape::new(vec![units])?));
                Ok(self.push(Layer::Dense { weight: w, bias: b }, inputs.to_vec(), vec![units]))
            }
            LayerSpec::Flatten => {
                let total = in_dims.iter().product();
                Ok(self.push(Layer::Flatten, inputs.to_vec(), vec![total]))
            }
            LayerSpec::AvgPool { size, stride } => {
                need_rank(3)?;
                if size == 0 || stride == 0 || size > in_dims[1] || size > in_dims[2] {
                    return Err(err(format!("pool {size}x{size} does not fit input {in_dims:?}")));
                }
                let out = vec![in_dims[0], (in_dims[1] - size) / stride + 1, (in_dims[2] - size) / stride + 1];
                Ok(self.push(
                    Layer::AvgPool {
                        size_h: size,
                        size_w: size,
                        stride,
                    },
                    inputs.to_vec(),
                    out,
                ))
            }
            LayerSpec::GlobalAvgPool => {
                need_rank(3)?;
                Ok(self.push(
                    Layer::AvgPool {
                        size_h: in_dims[1],
                        size_w: in_dims[2],
                        stride: 1,
                    },
                    inputs.to_vec(),
                    vec![in_dims[0], 1, 1],
                ))
            }
            LayerSpec::Batchnorm => {
                let c = in_dims[0];
                let g = self.add_param(ParamRole::BnGamma, Tensor::full(Shape::new(vec![c])?, 1.0));
                let b = self.add_param(ParamRole::BnBeta, Tensor::zeros(Shape::new(vec![c])?));
                Ok(self.push(
                    Layer::Batchnorm {
                        gamma: g,
                        beta: b,
                        running: RunningStats::new(c),
                    },
                    inputs.to_vec(),
                    in_dims,
                ))
            }
            LayerSpec::Concat => {
                need_rank(3)?;
                let mut channels = 0;
                for &i in inputs {
                    let d = self.dims(i);
                    if d.len() != 3 || d[1..] != in_dims[1..] {
                        return Err(err(format!("cannot concat {d:?} with {in_dims:?}")));
                    }
                    channels += d[0];
                }
                Ok(self.push(
                    Layer::Concat,
                    inputs.to_vec(),
                    vec![channels, in_dims[1], in_dims[2]],
                ))
            }
        }
    }

    pub fn build(self) -> Result<Model> {
        if self.model.nodes.len() < 2 {
            return Err(Error::Layer {
                layer: 0,
                reason: "model has no layers".into(),
            });
        }
        Ok(self.model)
    }
}
