//! Matrix-valued reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value. [`Tape::backward`] then walks the nodes in reverse, accumulating
//! gradients. Only nodes that depend on a parameter or on a leaf created with
//! [`Tape::variable`] receive gradients; constants and inputs are skipped.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    /// Constant matrix on the left: `S x`.
    LeftMul(Arc<Array2<f64>>, Var),
    Add(Var, Var),
    /// Row-vector bias broadcast over rows.
    AddBias(Var, Var),
    Mul(Var, Var),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
    consumed: bool,
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
            params: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn node(&self, v: Var) -> &Node {
        debug_assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index]
    }

    fn rg(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.node(v).value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input without gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::get`].
    pub fn variable(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Trainable parameter `id`; registering the same id twice returns the
    /// same node.
    pub fn param(&mut self, id: usize, value: &Array2<f64>) -> Var {
        if id >= self.params.len() {
            self.params.resize(id + 1, None);
        }
        if let Some(v) = self.params[id] {
            return v;
        }
        let v = self.push(value.clone(), Op::Param, true);
        self.params[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn left_mul(&mut self, s: &Arc<Array2<f64>>, x: Var) -> Var {
        let value = s.dot(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::LeftMul(Arc::clone(s), x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        debug_assert_eq!(b.nrows(), 1);
        let value = self.value(a) + &b.row(0);
        let rg = self.rg(a) || self.rg(bias);
        self.push(value, Op::AddBias(a, bias), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| 1.0 - v);
        let rg = self.rg(a);
        self.push(value, Op::OneMinus(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Reverse pass from `output` seeded with `seed` (same shape as the
    /// output). A tape can be differentiated once.
    pub fn backward(&mut self, output: Var, seed: &Array2<f64>) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        if output.tape != self.id || output.index >= self.nodes.len() {
            return Err(Error::InvalidArgument("output variable is not on this tape".into()));
        }
        if seed.dim() != self.value(output).dim() {
            return Err(Error::ShapeMismatch(format!(
                "seed {:?} for output {:?}",
                seed.dim(),
                self.value(output).dim()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Array2<f64>>> = (0..=output.index).map(|_| None).collect();
        grads[output.index] = Some(seed.clone());

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.index] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=output.index).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::LeftMul(m, x) => {
                    acc(&mut grads, *x, m.t().dot(&g));
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::AddBias(a, b) => {
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::OneMinus(a) => acc(&mut grads, *a, -g),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let d = ndarray::Zip::from(&g).and(y).map_collect(|g, y| g * y * (1.0 - y));
                    acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let d = ndarray::Zip::from(&g).and(y).map_collect(|g, y| g * (1.0 - y * y));
                    acc(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.rg(*p) {
                            acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
            }
        }

        let params = self
            .params
            .iter()
            .map(|v| v.and_then(|v| grads[v.index].clone()))
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            params,
        })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Array2<f64>>>,
    params: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Tape::variable`] or [`Tape::param`];
    /// `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Gradient of parameter `id` (zeros of `shape` when unused).
    pub fn param(&self, id: usize, shape: (usize, usize)) -> Array2<f64> {
        self.params
            .get(id)
            .and_then(Option::as_ref)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(shape))
    }
}
