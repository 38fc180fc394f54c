//! Tape-based reverse-mode differentiation.
//!
//! Every builder method evaluates its op eagerly and appends a node, so node
//! ids are a topological order by construction. [`Graph::backward`] walks
//! the tape in exact reverse order from the loss node and fills the gradient
//! slot of every node recorded up to it.

use crate::error::{bail, Result};
use crate::losses::{self, LossConfig};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    },
    Relu(NodeId),
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Sigmoid(NodeId),
    AbsDiff(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Add(Vec<NodeId>),
    Sum(NodeId),
    CosineDistance(NodeId, NodeId),
    Stack(Vec<NodeId>),
    Contrastive {
        d: NodeId,
        y: Vec<u8>,
        cfg: LossConfig,
    },
    Mse {
        p: NodeId,
        y: Vec<u8>,
        cfg: LossConfig,
    },
    Bce {
        p: NodeId,
        y: Vec<u8>,
        cfg: LossConfig,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf (input or parameter).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` loss with respect to `id`, if
    /// `id` was recorded before that loss.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes.get(id.0).and_then(|n| n.value.grad())
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<&Tensor> {
        match self.nodes.get(id.0) {
            Some(n) => Ok(&n.value),
            None => bail!(State, "node {} is not part of this graph", id.0),
        }
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let out = tensor::conv2d(self.check(input)?, self.check(kernels)?, self.check(bias)?, stride, pad)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                pad,
            },
            out,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let out = tensor::relu(self.check(input)?);
        Ok(self.push(Op::Relu(input), out))
    }

    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (out, argmax) = tensor::maxpool2(self.check(input)?)?;
        Ok(self.push(Op::MaxPool2 { input, argmax }, out))
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = tensor::linear(self.check(input)?, self.check(weight)?, self.check(bias)?)?;
        Ok(self.push(Op::Linear { input, weight, bias }, out))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId> {
        let out = tensor::sigmoid(self.check(input)?);
        Ok(self.push(Op::Sigmoid(input), out))
    }

    /// Elementwise `|a - b|`.
    pub fn abs_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip(a, b, "abs_diff", |x, y| (x - y).abs())?;
        Ok(self.push(Op::AbsDiff(a, b), out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    /// Elementwise sum of same-shape nodes.
    pub fn add(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let Some((&first, rest)) = terms.split_first() else {
            bail!(Shape, "add of zero terms");
        };
        let mut out = self.check(first)?.clone();
        out.clear_grad();
        for &t in rest {
            let v = self.check(t)?;
            if v.shape() != out.shape() {
                bail!(Shape, "add of shapes {:?} and {:?}", out.shape(), v.shape());
            }
            for (o, x) in out.data_mut().iter_mut().zip(v.data()) {
                *o += x;
            }
        }
        Ok(self.push(Op::Add(terms.to_vec()), out))
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.check(input)?.data().iter().sum();
        Ok(self.push(Op::Sum(input), Tensor::scalar(s)))
    }

    /// Scalar `1 - cos(a, b)` over the flattened operands.
    pub fn cosine_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = losses::cosine_distance(self.check(a)?.data(), self.check(b)?.data())?;
        Ok(self.push(Op::CosineDistance(a, b), Tensor::scalar(d)))
    }

    /// Concatenates one-element nodes into a vector.
    pub fn stack(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let values = items
            .iter()
            .map(|&id| self.check(id).and_then(Tensor::item))
            .collect::<Result<Vec<_>>>()?;
        let out = Tensor::vector(values)?;
        Ok(self.push(Op::Stack(items.to_vec()), out))
    }

    pub fn contrastive_loss(&mut self, d: NodeId, y: &[u8], cfg: &LossConfig) -> Result<NodeId> {
        let v = losses::contrastive_loss(self.check(d)?.data(), y, cfg)?;
        Ok(self.push(
            Op::Contrastive {
                d,
                y: y.to_vec(),
                cfg: cfg.clone(),
            },
            Tensor::scalar(v),
        ))
    }

    pub fn mse_loss(&mut self, p: NodeId, y: &[u8], cfg: &LossConfig) -> Result<NodeId> {
        let v = losses::mse_loss(self.check(p)?.data(), y, cfg)?;
        Ok(self.push(
            Op::Mse {
                p,
                y: y.to_vec(),
                cfg: cfg.clone(),
            },
            Tensor::scalar(v),
        ))
    }

    pub fn bce_loss(&mut self, p: NodeId, y: &[u8], cfg: &LossConfig) -> Result<NodeId> {
        let v = losses::bce_loss(self.check(p)?.data(), y, cfg)?;
        Ok(self.push(
            Op::Bce {
                p,
                y: y.to_vec(),
                cfg: cfg.clone(),
            },
            Tensor::scalar(v),
        ))
    }

    fn zip(&self, a: NodeId, b: NodeId, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape() != tb.shape() {
            bail!(Shape, "{what} of shapes {:?} and {:?}", ta.shape(), tb.shape());
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Backpropagates from the one-element node `loss` with seed 1.
    ///
    /// Every node recorded at or before `loss` gets a gradient slot (zeros
    /// when unreachable); later nodes keep whatever they had.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes.is_empty() {
            bail!(State, "backward called before any forward op was recorded");
        }
        let seed_len = self.check(loss)?.len();
        if seed_len != 1 {
            bail!(Shape, "backward needs a scalar loss, got {seed_len} elements");
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let g = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
            node.value.set_grad(g)?;
        }
        Ok(())
    }

    /// Hash of every piecewise decision taken in the forward pass: relu
    /// masks, pooling winners, abs-diff signs, active hinges and BCE
    /// clamps. Two evaluations with equal signatures lie on the same
    /// smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = Fnv::default();
        for node in &self.nodes {
            let val = |id: &NodeId| self.nodes[id.0].value.data();
            match &node.op {
                Op::Relu(_) => node.value.data().iter().for_each(|&v| h.bit(v > 0.0)),
                Op::MaxPool2 { argmax, .. } => argmax.iter().for_each(|&i| h.word(i as u64)),
                Op::AbsDiff(a, b) => val(a)
                    .iter()
                    .zip(val(b))
                    .for_each(|(x, y)| h.word(x.total_cmp(y) as u64)),
                Op::Contrastive { d, y, cfg } => val(d)
                    .iter()
                    .zip(y)
                    .for_each(|(&d, &y)| h.bit(y == 0 && cfg.margin - d > 0.0)),
                Op::Bce { p, cfg, .. } => val(p).iter().for_each(|&p| {
                    h.word(u64::from(p < cfg.bce_clamp_eps) | u64::from(p > 1.0 - cfg.bce_clamp_eps) << 1)
                }),
                _ => {}
            }
        }
        h.0
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                pad,
            } => {
                let (gx, gk, gb) = tensor::conv2d_backward(val(*input), val(*kernels), val(*bias), *stride, *pad, g)?;
                accumulate(grads, *input, &gx);
                accumulate(grads, *kernels, &gk);
                accumulate(grads, *bias, &gb);
            }
            Op::Relu(input) => {
                let gx: Vec<f64> = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(grads, *input, &gx);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut gx = vec![0.0; val(*input).len()];
                for (&src, &gi) in argmax.iter().zip(g) {
                    gx[src] += gi;
                }
                accumulate(grads, *input, &gx);
            }
            Op::Linear { input, weight, bias } => {
                let (gx, gw, gb) = tensor::linear_backward(val(*input), val(*weight), g);
                accumulate(grads, *input, &gx);
                accumulate(grads, *weight, &gw);
                accumulate(grads, *bias, &gb);
            }
            Op::Sigmoid(input) => {
                let gx: Vec<f64> = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &g)| g * s * (1.0 - s))
                    .collect();
                accumulate(grads, *input, &gx);
            }
            Op::AbsDiff(a, b) => {
                let sign: Vec<f64> = val(*a)
                    .data()
                    .iter()
                    .zip(val(*b).data())
                    .zip(g)
                    .map(|((&x, &y), &g)| {
                        if x > y {
                            g
                        } else if x < y {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let neg: Vec<f64> = sign.iter().map(|v| -v).collect();
                accumulate(grads, *a, &sign);
                accumulate(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = val(*b).data().iter().zip(g).map(|(y, g)| y * g).collect();
                let gb: Vec<f64> = val(*a).data().iter().zip(g).map(|(x, g)| x * g).collect();
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::Add(terms) => {
                for &t in terms {
                    accumulate(grads, t, g);
                }
            }
            Op::Sum(input) => {
                let gx = vec![g[0]; val(*input).len()];
                accumulate(grads, *input, &gx);
            }
            Op::CosineDistance(a, b) => {
                let (ga, gb) = losses::cosine_similarity_grad(val(*a).data(), val(*b).data());
                // d = 1 - s
                let ga: Vec<f64> = ga.iter().map(|v| -v * g[0]).collect();
                let gb: Vec<f64> = gb.iter().map(|v| -v * g[0]).collect();
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::Stack(items) => {
                for (&item, &gi) in items.iter().zip(g) {
                    accumulate(grads, item, &[gi]);
                }
            }
            Op::Contrastive { d, y, cfg } => {
                let gd = losses::contrastive_loss_grad(val(*d).data(), y, cfg)?;
                accumulate(grads, *d, &scaled(&gd, g[0]));
            }
            Op::Mse { p, y, cfg } => {
                let gp = losses::mse_loss_grad(val(*p).data(), y, cfg)?;
                accumulate(grads, *p, &scaled(&gp, g[0]));
            }
            Op::Bce { p, y, cfg } => {
                let gp = losses::bce_loss_grad(val(*p).data(), y, cfg)?;
                accumulate(grads, *p, &scaled(&gp, g[0]));
            }
        }
        Ok(())
    }
}

struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn word(&mut self, w: u64) {
        for byte in w.to_le_bytes() {
            self.0 = (self.0 ^ u64::from(byte)).wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn bit(&mut self, b: bool) {
        self.word(u64::from(b));
    }
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}
