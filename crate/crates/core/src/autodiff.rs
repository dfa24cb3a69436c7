//! Tape-based reverse-mode differentiation over [`Tensor`] kernels.
//!
//! Nodes are appended in evaluation order, so the tape is acyclic by
//! construction and a single reverse sweep visits each node once. Nodes
//! that do not depend on any parameter are never differentiated through.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::tensor::{self, Tensor};
use crate::{Error, Result};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a node on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Relu(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    AddBias(Var, Var),
    AddChannelBias(Var, Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    PairReduce {
        a: Var,
        b: Var,
        da: Tensor,
        db: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    trainable: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the trainable leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Removes and returns the gradient of `v`.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::contract("variable belongs to a different tape"));
        }
        self.nodes
            .get(v.index)
            .ok_or_else(|| Error::contract("variable index outside tape"))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        let mut needs_grad = false;
        for &v in inputs {
            needs_grad |= self.check(v)?.needs_grad;
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            trainable: false,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: trainable,
            trainable,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a trainable parameter.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a constant leaf (data, sampled noise).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.check(v)?.value)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a)?.add(self.value(b)?)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a)?.sub(self.value(b)?)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a)?.mul(self.value(b)?)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a)?.scale(k)?;
        self.push(out, Op::Scale(a, k), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a)?.square()?;
        self.push(out, Op::Square(a), &[a])
    }

    /// Elementwise square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a)?.sqrt()?;
        self.push(out, Op::Sqrt(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a)?.exp()?;
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a)?.ln()?;
        self.push(out, Op::Ln(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a)?.sigmoid()?;
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a)?.relu()?;
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a)?, self.value(b)?)?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = tensor::conv2d(self.value(input)?, self.value(kernel)?, stride, padding)?;
        self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            &[input, kernel],
        )
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x)?.add_bias(self.value(bias)?)?;
        self.push(out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x)?.add_channel_bias(self.value(bias)?)?;
        self.push(out, Op::AddChannelBias(x, bias), &[x, bias])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a)?.reshape(shape)?;
        self.push(out, Op::Reshape(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a)?.sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a)?.mean());
        self.push(out, Op::Mean(a), &[a])
    }

    /// Mean softmax cross-entropy of `logits[B×K]` against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = tensor::softmax_cross_entropy(self.value(logits)?, labels)?;
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Scalar `Σᵢ f(aᵢ, bᵢ)` where `f` returns `(value, ∂f/∂a, ∂f/∂b)`.
    ///
    /// Used for per-weight regularizers whose partials are known in closed
    /// form; the partials are stored and replayed during the reverse sweep.
    pub fn pair_reduce(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> (f64, f64, f64),
    ) -> Result<Var> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!(
                "pair_reduce shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let n = av.len();
        let (mut da, mut db) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let mut total = 0.0;
        for (&x, &y) in av.data().iter().zip(bv.data()) {
            let (v, gx, gy) = f(x, y);
            total += v;
            da.push(gx);
            db.push(gy);
        }
        let shape = av.shape().to_vec();
        let da = Tensor::new(shape.clone(), da)?;
        let db = Tensor::new(shape, db)?;
        if !total.is_finite() {
            return Err(Error::NonFinite { op: "pair_reduce" });
        }
        self.push(Tensor::scalar(total), Op::PairReduce { a, b, da, db }, &[a, b])
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.check(loss)?;
        if !node.value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.index + 1];
        adj[loss.index] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.index).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                adj[i] = Some(g);
                continue;
            }
            for (v, contrib) in self.local_grads(node, &g)? {
                accumulate(&mut adj[v.index], contrib)?;
            }
        }

        let grads = adj
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.filter(|_| self.nodes[i].trainable))
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index].needs_grad
    }

    /// Vector-Jacobian products of `node` for each input that needs a gradient.
    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut out = Vec::with_capacity(2);
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, g.scale(-1.0)?));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.mul(self.val(*b))?));
                }
                if self.wants(*b) {
                    out.push((*b, g.mul(self.val(*a))?));
                }
            }
            Op::Scale(a, k) => out.push((*a, g.scale(*k)?)),
            Op::Square(a) => out.push((*a, g.zip(self.val(*a), "square'", |g, x| 2.0 * x * g)?)),
            Op::Sqrt(a) => out.push((
                *a,
                g.zip(y, "sqrt'", |g, s| if s > 0.0 { 0.5 * g / s } else { 0.0 })?,
            )),
            Op::Exp(a) => out.push((*a, g.mul(y)?)),
            Op::Ln(a) => out.push((*a, g.zip(self.val(*a), "ln'", |g, x| g / x)?)),
            Op::Sigmoid(a) => out.push((*a, g.zip(y, "sigmoid'", |g, s| g * s * (1.0 - s))?)),
            Op::Relu(a) => out.push((
                *a,
                g.zip(self.val(*a), "relu'", |g, x| if x > 0.0 { g } else { 0.0 })?,
            )),
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, tensor::matmul_nt(g, self.val(*b))?));
                }
                if self.wants(*b) {
                    out.push((*b, tensor::matmul_tn(self.val(*a), g)?));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (x, k) = (self.val(*input), self.val(*kernel));
                if self.wants(*input) {
                    let gi = tensor::conv2d_grad_input(g, k, x.shape(), *stride, *padding)?;
                    out.push((*input, gi));
                }
                if self.wants(*kernel) {
                    let gk = tensor::conv2d_grad_kernel(g, x, k.shape(), *stride, *padding)?;
                    out.push((*kernel, gk));
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    out.push((*x, g.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, g.sum_leading()));
                }
            }
            Op::AddChannelBias(x, b) => {
                if self.wants(*x) {
                    out.push((*x, g.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, g.sum_channels()));
                }
            }
            Op::Reshape(a) => out.push((*a, g.reshape(self.val(*a).shape())?)),
            Op::Sum(a) => {
                let gs = g.item()?;
                out.push((*a, Tensor::full(self.val(*a).shape(), gs)));
            }
            Op::Mean(a) => {
                let x = self.val(*a);
                let gs = g.item()? / x.len() as f64;
                out.push((*a, Tensor::full(x.shape(), gs)));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let gs = g.item()? / labels.len() as f64;
                let k = probs.row_len();
                let mut d = probs.data().to_vec();
                for (row, &lab) in d.chunks_mut(k).zip(labels) {
                    row[lab] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= gs);
                }
                out.push((*logits, Tensor::new(probs.shape().to_vec(), d)?));
            }
            Op::PairReduce { a, b, da, db } => {
                let gs = g.item()?;
                if self.wants(*a) {
                    out.push((*a, da.scale(gs)?));
                }
                if self.wants(*b) {
                    out.push((*b, db.scale(gs)?));
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) -> Result<()> {
    match slot {
        None => *slot = Some(contrib),
        Some(acc) => {
            if acc.shape() != contrib.shape() {
                return Err(Error::dim("gradient shape mismatch during accumulation"));
            }
            for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                *a += c;
            }
        }
    }
    Ok(())
}
