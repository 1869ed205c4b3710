//! Append-only computation graph with reverse-mode differentiation.
//!
//! Operations compute their value eagerly when recorded; `backward` replays
//! the records in reverse, accumulating gradients. A graph is single-writer:
//! construction and backward happen on one thread of control, while distinct
//! graphs may be used concurrently.

use super::tensor::{
    logsumexp_slice, matmul, matmul_a_bt, matmul_at_b, sigmoid, softmax_slice, softplus, Tensor,
};
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    /// (n,k) @ (k,m) -> (n,m)
    MatMul(NodeId, NodeId),
    /// (n,m) + broadcast (m) -> (n,m)
    BiasAdd(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Square(NodeId),
    /// Row-wise logsumexp: (n,m) -> (n); a vector is one row -> (1).
    LogSumExpRows(NodeId),
    /// Row-wise log-softmax, shape preserved.
    LogSoftmaxRows(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Input => vec![],
            Op::MatMul(a, b) | Op::BiasAdd(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![a, b]
            }
            Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::LogSumExpRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::MeanAll(a)
            | Op::SumAll(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a) => vec![a],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Reverse-mode differentiation graph over [`Tensor`] values.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradient accumulators produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `id`, if the node was reachable.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, or a zero tensor of `shape` when unreachable.
    pub fn get_or_zero(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
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

    /// Value held at a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Attach an input tensor. Inputs are leaves; gradients accumulate here.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        // Same as input; named for call-site clarity when the tensor is not a
        // parameter anyone differentiates with respect to.
        self.push(Op::Input, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let value = matmul(va, vb);
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// Add a bias vector to every row of a matrix.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.shape().len() != 1 || vx.view_cols() != vb.len() {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                lhs: vx.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let cols = vx.view_cols();
        let mut out = vx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += vb.data()[i % cols];
        }
        Ok(self.push(Op::BiasAdd(x, bias), out))
    }

    /// Rectifier max(0, x). The subgradient at the kink is 0.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), value)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(softplus);
        self.push(Op::Softplus(x), value)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::ln);
        self.push(Op::Log(x), value)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::exp);
        self.push(Op::Exp(x), value)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v * v);
        self.push(Op::Square(x), value)
    }

    /// Row-wise logsumexp with max-subtraction; finite for logits up to 1e4
    /// and far beyond. A matrix (n,m) yields a vector (n); a vector is
    /// treated as a single row and yields a scalar.
    pub fn logsumexp_rows(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let rows = vx.view_rows();
        let data: Vec<f64> = (0..rows).map(|r| logsumexp_slice(vx.row(r))).collect();
        let value = Tensor::vector(data);
        self.push(Op::LogSumExpRows(x), value)
    }

    /// Row-wise log-softmax, shape preserved.
    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let rows = vx.view_rows();
        let cols = vx.view_cols();
        let mut data = Vec::with_capacity(vx.len());
        for r in 0..rows {
            let row = vx.row(r);
            let lse = logsumexp_slice(row);
            data.extend(row.iter().map(|&v| v - lse));
        }
        let value = Tensor::new(vx.shape().to_vec(), data).expect("shape preserved");
        let _ = cols;
        self.push(Op::LogSoftmaxRows(x), value)
    }

    /// Mean over every element, yielding a scalar.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let value = Tensor::scalar(vx.data().iter().sum::<f64>() / vx.len() as f64);
        self.push(Op::MeanAll(x), value)
    }

    /// Sum over every element, yielding a scalar.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(Op::SumAll(x), value)
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let value = self.value(x).map(|v| v * k);
        self.push(Op::Scale(x, k), value)
    }

    /// Add a constant to every element.
    pub fn add_scalar(&mut self, x: NodeId, k: f64) -> NodeId {
        let value = self.value(x).map(|v| v + k);
        self.push(Op::AddScalar(x), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    fn elementwise(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        Ok(va.zip(vb, f))
    }

    /// Gradients of a scalar loss w.r.t. every node reachable from it.
    ///
    /// Deterministic for a fixed graph; the graph itself is not mutated, so
    /// several losses recorded on one graph can each be differentiated.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss {
                got: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(out_grad) = grads[i].take() else {
                continue;
            };
            self.accumulate(i, &out_grad, &mut grads);
            grads[i] = Some(out_grad);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, idx: usize, out_grad: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let add_to = |grads: &mut [Option<Tensor>], id: NodeId, g: Tensor| {
            match &mut grads[id.0] {
                Some(acc) => acc.add_in_place(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match node.op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                add_to(grads, a, matmul_a_bt(out_grad, vb));
                add_to(grads, b, matmul_at_b(va, out_grad));
            }
            Op::BiasAdd(x, bias) => {
                let cols = self.value(bias).len();
                let mut bias_grad = vec![0.0; cols];
                for (i, &g) in out_grad.data().iter().enumerate() {
                    bias_grad[i % cols] += g;
                }
                add_to(grads, x, out_grad.clone());
                add_to(grads, bias, Tensor::vector(bias_grad));
            }
            Op::Relu(x) => {
                let g = self.value(x).zip(out_grad, |v, g| if v > 0.0 { g } else { 0.0 });
                add_to(grads, x, g);
            }
            Op::Sigmoid(x) => {
                let g = node.value.zip(out_grad, |y, g| g * y * (1.0 - y));
                add_to(grads, x, g);
            }
            Op::Softplus(x) => {
                let g = self.value(x).zip(out_grad, |v, g| g * sigmoid(v));
                add_to(grads, x, g);
            }
            Op::Log(x) => {
                let g = self.value(x).zip(out_grad, |v, g| g / v);
                add_to(grads, x, g);
            }
            Op::Exp(x) => {
                let g = node.value.zip(out_grad, |y, g| g * y);
                add_to(grads, x, g);
            }
            Op::Square(x) => {
                let g = self.value(x).zip(out_grad, |v, g| 2.0 * v * g);
                add_to(grads, x, g);
            }
            Op::LogSumExpRows(x) => {
                let vx = self.value(x);
                let rows = vx.view_rows();
                let mut data = Vec::with_capacity(vx.len());
                for r in 0..rows {
                    let sm = softmax_slice(vx.row(r));
                    let g = out_grad.data()[r];
                    data.extend(sm.into_iter().map(|p| p * g));
                }
                add_to(
                    grads,
                    x,
                    Tensor::new(vx.shape().to_vec(), data).expect("shape preserved"),
                );
            }
            Op::LogSoftmaxRows(x) => {
                let vx = self.value(x);
                let rows = vx.view_rows();
                let cols = vx.view_cols();
                let mut data = Vec::with_capacity(vx.len());
                for r in 0..rows {
                    let sm = softmax_slice(vx.row(r));
                    let grow = &out_grad.data()[r * cols..(r + 1) * cols];
                    let gsum: f64 = grow.iter().sum();
                    data.extend(sm.iter().zip(grow).map(|(&p, &g)| g - p * gsum));
                }
                add_to(
                    grads,
                    x,
                    Tensor::new(vx.shape().to_vec(), data).expect("shape preserved"),
                );
            }
            Op::MeanAll(x) => {
                let vx = self.value(x);
                let g = out_grad.scalar_value() / vx.len() as f64;
                add_to(grads, x, vx.map(|_| g));
            }
            Op::SumAll(x) => {
                let g = out_grad.scalar_value();
                add_to(grads, x, self.value(x).map(|_| g));
            }
            Op::Scale(x, k) => {
                add_to(grads, x, out_grad.map(|g| g * k));
            }
            Op::AddScalar(x) => {
                add_to(grads, x, out_grad.clone());
            }
            Op::Add(a, b) => {
                add_to(grads, a, out_grad.clone());
                add_to(grads, b, out_grad.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, a, out_grad.clone());
                add_to(grads, b, out_grad.map(|g| -g));
            }
            Op::Mul(a, b) => {
                add_to(grads, a, self.value(b).zip(out_grad, |v, g| v * g));
                add_to(grads, b, self.value(a).zip(out_grad, |v, g| v * g));
            }
        }
        debug_assert!(node
            .op
            .inputs()
            .iter()
            .all(|inp| inp.0 < idx), "graph must be acyclic by construction");
    }
}
