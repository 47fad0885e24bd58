//! Reverse-mode tape over the small operator set the codec needs.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for the backward pass.

use crate::autodiff::conv::{conv2d_backward, conv2d_forward};
use crate::autodiff::params::{ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::msssim;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    /// Constant input; no gradient flows into it.
    Constant,
    /// Leaf whose gradient is kept on the node after `backward`.
    Variable,
    Param(ParamId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Upsample2x(NodeId),
    Mean(NodeId),
    Affine {
        input: NodeId,
        scale: f64,
    },
    MsSsim {
        a: NodeId,
        b: NodeId,
        scales: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-owner computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all recorded nodes so the graph can be rebuilt.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated on a node by the last `backward`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Variable, true)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        let mut value = params.tensor(id).clone();
        value.clear_grad();
        self.push(value, Op::Param(id), true)
    }

    /// `weight` is (out, in, kh, kw); `bias` holds `out` values in any 4-d layout.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let out = conv2d_forward(self.value(input), self.value(weight), self.value(bias).data(), stride, padding)?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let out = Tensor::new(v.shape(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| sigmoid(a)).collect();
        let out = Tensor::new(v.shape(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid(x), needs)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                detail: format!("{sa} vs {sb} (no broadcasting)"),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    /// Nearest-neighbour 2× upsampling: each value becomes a 2×2 block.
    pub fn upsample_nearest_2x(&mut self, x: NodeId) -> NodeId {
        let out = upsample2x(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::Upsample2x(x), needs)
    }

    /// Mean of all elements as a 1×1×1×1 tensor.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean(x), needs)
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|a| scale * a + shift).collect();
        let out = Tensor::new(v.shape(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Affine { input: x, scale }, needs)
    }

    /// Mean MS-SSIM over all planes as a scalar node, differentiable in both inputs.
    pub fn ms_ssim(&mut self, a: NodeId, b: NodeId, scales: usize) -> Result<NodeId> {
        let value = msssim::ms_ssim(self.value(a), self.value(b), scales)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(value), Op::MsSsim { a, b, scales }, needs))
    }

    /// Backpropagates from a scalar `loss`, accumulating parameter gradients
    /// into `params` and keeping variable gradients on the tape.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamSet) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this graph; reset it first".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Constant => {}
                Op::Variable => {}
                Op::Param(pid) => {
                    params.get_mut(pid).tensor.accumulate_grad(&g)?;
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let cg = conv2d_backward(
                        self.value(input),
                        self.value(weight),
                        &g,
                        stride,
                        padding,
                        self.needs(input),
                    )?;
                    if self.needs(input) {
                        accumulate(&mut grads, input, &cg.input);
                    }
                    accumulate(&mut grads, weight, &cg.weight);
                    accumulate(&mut grads, bias, &cg.bias);
                }
                Op::Relu(x) => {
                    let v = self.value(x).data();
                    let d: Vec<f64> = g.iter().zip(v).map(|(g, &a)| if a > 0.0 { *g } else { 0.0 }).collect();
                    accumulate(&mut grads, x, &d);
                }
                Op::Sigmoid(x) => {
                    let out = self.nodes[idx].value.data();
                    let d: Vec<f64> = g.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect();
                    accumulate(&mut grads, x, &d);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, &g);
                    accumulate(&mut grads, b, &g);
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let d: Vec<f64> = g.iter().zip(self.value(b).data()).map(|(g, y)| g * y).collect();
                        accumulate(&mut grads, a, &d);
                    }
                    if self.needs(b) {
                        let d: Vec<f64> = g.iter().zip(self.value(a).data()).map(|(g, x)| g * x).collect();
                        accumulate(&mut grads, b, &d);
                    }
                }
                Op::Upsample2x(x) => {
                    let d = upsample2x_adjoint(self.value(x).shape(), &g);
                    accumulate(&mut grads, x, &d);
                }
                Op::Mean(x) => {
                    let n = self.value(x).numel();
                    let d = vec![g[0] / n as f64; n];
                    accumulate(&mut grads, x, &d);
                }
                Op::Affine { input, scale } => {
                    let d: Vec<f64> = g.iter().map(|g| g * scale).collect();
                    accumulate(&mut grads, input, &d);
                }
                Op::MsSsim { a, b, scales } => {
                    let (_, ga, gb) = msssim::ms_ssim_with_grad(self.value(a), self.value(b), scales, g[0])?;
                    if self.needs(a) {
                        accumulate(&mut grads, a, &ga);
                    }
                    if self.needs(b) {
                        accumulate(&mut grads, b, &gb);
                    }
                }
            }
            grads[idx] = Some(g);
        }
        // Keep gradients only for leaves the caller may inspect.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Variable | Op::Param(_)) {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]) {
    match &mut grads[id.0] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn upsample2x(t: &Tensor) -> Tensor {
    let [n, c, h, w] = t.shape().0;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(Shape::new(n, c, oh, ow));
    let src = t.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                d[y * ow + x] = s[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

fn upsample2x_adjoint(in_shape: Shape, grad: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = in_shape.0;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; in_shape.numel()];
    for plane in 0..n * c {
        let g = &grad[plane * oh * ow..(plane + 1) * oh * ow];
        let d = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                d[(y / 2) * w + x / 2] += g[y * ow + x];
            }
        }
    }
    out
}
