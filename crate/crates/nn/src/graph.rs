//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass. Losses
//! are evaluated outside the graph; the caller seeds [`Graph::backward`] with
//! the loss gradient for each output node and gets back one gradient per
//! parameter.

use crate::ops;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Axis-aligned region of interest in input-image pixels, tied to one image of the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roi {
    pub batch: usize,
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    MulChannel {
        x: Var,
        gate: Var,
    },
    Upsample(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<u32>,
    },
    ChannelMean(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    RoiAlign {
        x: Var,
        taps: ops::RoiTaps,
    },
    ScaledExp {
        x: Var,
        scale: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape(Var),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradients for every parameter of a [`ParamStore`]; `None` where no path
/// from the seeded outputs reaches the parameter.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            grads: vec![None; params.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Largest absolute gradient entry over the given parameters.
    pub fn max_abs(&self, ids: impl IntoIterator<Item = ParamId>) -> f32 {
        ids.into_iter()
            .filter_map(|id| self.get(id))
            .flat_map(|t| t.data().iter())
            .fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: Tensor) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    track: bool,
}

impl<'p> Graph<'p> {
    /// A graph whose parameters receive gradients.
    pub fn new(params: &'p ParamStore) -> Self {
        Self::with_tracking(params, true)
    }

    /// A graph for evaluation: values only, `backward` yields nothing.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self::with_tracking(params, false)
    }

    fn with_tracking(params: &'p ParamStore, track: bool) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            track,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.track && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; gradients never flow into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: self.track,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let bias = b.map(|b| self.value(b).data());
        let out = ops::conv2d_forward(self.value(x), self.value(w), bias, stride, pad);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
        )
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (out, mean, rstd) = ops::group_norm_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            groups,
        );
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = v.max(0.0);
        }
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = ops::sigmoid(*v);
        }
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// `x * gate` where `gate` has a single channel broadcast over all of `x`'s channels.
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Var {
        let out = ops::mul_channel_forward(self.value(x), self.value(gate));
        self.push(out, Op::MulChannel { x, gate }, &[x, gate])
    }

    /// Nearest-neighbour resize of the spatial dimensions.
    pub fn upsample(&mut self, x: Var, height: usize, width: usize) -> Var {
        let out = ops::upsample_forward(self.value(x), height, width);
        self.push(out, Op::Upsample(x), &[x])
    }

    /// Maximum over channels, keeping a singleton channel axis.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let (out, argmax) = ops::channel_max_forward(self.value(x));
        self.push(out, Op::ChannelMax { x, argmax }, &[x])
    }

    /// Mean over channels, keeping a singleton channel axis.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let out = ops::channel_mean_forward(self.value(x));
        self.push(out, Op::ChannelMean(x), &[x])
    }

    /// Concatenates along axis 0 (any rank) or axis 1 (NCHW).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_forward(&values, axis);
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Bilinear RoI pooling to `out_size × out_size` with `sampling × sampling`
    /// samples per bin. Boxes are scaled by `1 / stride` and shifted by half a
    /// cell so that pixel centres line up.
    pub fn roi_align(
        &mut self,
        x: Var,
        rois: &[Roi],
        stride: f32,
        out_size: usize,
        sampling: usize,
    ) -> Var {
        let (_, _, h, w) = self.value(x).dims4();
        let taps = ops::RoiTaps::build(rois, h, w, 1.0 / stride, out_size, sampling);
        let out = taps.forward(self.value(x));
        self.push(out, Op::RoiAlign { x, taps }, &[x])
    }

    /// `mult * exp(scale * x)` with a learnable one-element `scale`.
    pub fn scaled_exp(&mut self, x: Var, scale: Var, mult: f32) -> Var {
        let s = self.value(scale).data()[0];
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = mult * (s * *v).exp();
        }
        self.push(out, Op::ScaledExp { x, scale }, &[x, scale])
    }

    /// `x · wᵀ + b` for `x: [N, D]`, `w: [O, D]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = ops::linear_forward(self.value(x), self.value(w), self.value(b).data());
        self.push(out, Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Propagates the seeded output gradients back to the parameters.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        let mut result = Gradients::zeros_like(self.params);
        if !self.track {
            return result;
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.shape(v), "seed shape mismatch");
            accumulate(&mut grads, v, g);
        }

        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => result.accumulate(*id, gy),
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let (gx, gw, gb) = ops::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &gy,
                        *stride,
                        *pad,
                        self.needs(*x),
                    );
                    if let Some(gx) = gx {
                        accumulate(&mut grads, *x, gx);
                    }
                    self.send(&mut grads, *w, gw);
                    if let Some(b) = b {
                        self.send(&mut grads, *b, gb);
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    mean,
                    rstd,
                } => {
                    let (gx, ggamma, gbeta) = ops::group_norm_backward(
                        self.value(*x),
                        self.value(*gamma).data(),
                        &gy,
                        *groups,
                        mean,
                        rstd,
                    );
                    self.send(&mut grads, *x, gx);
                    self.send(&mut grads, *gamma, ggamma);
                    self.send(&mut grads, *beta, gbeta);
                }
                Op::Relu(x) => {
                    let y = node.value.as_ref().unwrap();
                    let mut gx = gy;
                    for (g, &out) in gx.data_mut().iter_mut().zip(y.data()) {
                        if out <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    self.send(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let y = node.value.as_ref().unwrap();
                    let mut gx = gy;
                    for (g, &s) in gx.data_mut().iter_mut().zip(y.data()) {
                        *g *= s * (1.0 - s);
                    }
                    self.send(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) && self.needs(*b) {
                        accumulate(&mut grads, *a, gy.clone());
                        accumulate(&mut grads, *b, gy);
                    } else if self.needs(*a) {
                        accumulate(&mut grads, *a, gy);
                    } else {
                        self.send(&mut grads, *b, gy);
                    }
                }
                Op::MulChannel { x, gate } => {
                    let (gx, ggate) =
                        ops::mul_channel_backward(self.value(*x), self.value(*gate), &gy);
                    self.send(&mut grads, *x, gx);
                    self.send(&mut grads, *gate, ggate);
                }
                Op::Upsample(x) => {
                    let gx = ops::upsample_backward(self.value(*x).shape(), &gy);
                    self.send(&mut grads, *x, gx);
                }
                Op::ChannelMax { x, argmax } => {
                    let gx = ops::channel_max_backward(self.value(*x).shape(), argmax, &gy);
                    self.send(&mut grads, *x, gx);
                }
                Op::ChannelMean(x) => {
                    let gx = ops::channel_mean_backward(self.value(*x).shape(), &gy);
                    self.send(&mut grads, *x, gx);
                }
                Op::Concat { parts, axis } => {
                    let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
                    let pieces = ops::concat_backward(&shapes, *axis, &gy);
                    for (p, g) in parts.iter().zip(pieces) {
                        self.send(&mut grads, *p, g);
                    }
                }
                Op::RoiAlign { x, taps } => {
                    let gx = taps.backward(self.value(*x).shape(), &gy);
                    self.send(&mut grads, *x, gx);
                }
                Op::ScaledExp { x, scale } => {
                    let y = node.value.as_ref().unwrap();
                    let s = self.value(*scale).data()[0];
                    let xv = self.value(*x);
                    let mut gs = 0.0f32;
                    let mut gx = gy;
                    for ((g, &out), &inp) in gx.data_mut().iter_mut().zip(y.data()).zip(xv.data())
                    {
                        let gout = *g * out;
                        gs += gout * inp;
                        *g = gout * s;
                    }
                    self.send(&mut grads, *x, gx);
                    self.send(&mut grads, *scale, Tensor::scalar(gs));
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = ops::linear_backward(self.value(*x), self.value(*w), &gy);
                    self.send(&mut grads, *x, gx);
                    self.send(&mut grads, *w, gw);
                    self.send(&mut grads, *b, gb);
                }
                Op::Reshape(x) => {
                    let shape = self.shape(*x).to_vec();
                    self.send(&mut grads, *x, gy.reshape(&shape));
                }
            }
        }
        result
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if self.needs(v) {
            accumulate(grads, v, g);
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
