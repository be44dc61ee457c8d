//! Define-by-run tape. Every forward op appends a node holding its value;
//! [`Graph::backward`] walks the tape in reverse.
//!
//! Gradients only flow into nodes whose `requires_grad` flag is set, which is
//! inherited from inputs. Frozen parameters are bound with `trainable = false`
//! so their weight gradients are never computed, while gradients still pass
//! *through* the ops that use them.

use std::collections::HashMap;
use std::sync::Arc;

use crate::kernels;
use crate::store::ParamStore;
use crate::tensor::Tensor;
use crate::{NnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Silu(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<f32>, rstd: Vec<f32> },
    Cat(Vec<Var>),
    Upsample2x(Var),
    AvgPool2x(Var),
    Mse(Var, Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    trainable: Vec<(String, Var)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; gradients are not tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that gradients flow into (used for gradient checks and for
    /// differentiating with respect to activations).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter from `store`. Binding the same name twice
    /// returns the same variable.
    pub fn param(&mut self, store: &ParamStore, name: &str, trainable: bool) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get_arc(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        let v = self.push_arc(value, Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        if trainable {
            self.trainable.push((name.to_string(), v));
        }
        Ok(v)
    }

    pub fn trainable_params(&self) -> &[(String, Var)] {
        &self.trainable
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// Broadcasting add; `b` may have size-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::broadcast_binary(self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Broadcasting multiply; `b` may have size-1 axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        let out = self.value(x).scale(k);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, k), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = kernels::silu(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let o = kernels::group_norm(self.value(x), self.value(gamma), self.value(beta), groups)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::GroupNorm { x, gamma, beta, groups, mean: o.mean, rstd: o.rstd };
        Ok(self.push(o.y, op, rg))
    }

    pub fn cat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::cat_channels(&values)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Cat(parts.to_vec()), rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let out = kernels::upsample_nearest2x(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Upsample2x(x), rg)
    }

    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let out = kernels::avg_pool2x(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::AvgPool2x(x), rg))
    }

    /// Mean squared error, returned as a `[1, 1, 1, 1]` scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_shape(vb.shape())?;
        let n = va.numel().max(1) as f64;
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| ((x - y) as f64).powi(2))
            .sum();
        let out = Tensor::from_vec([1, 1, 1, 1], vec![(s / n) as f32])?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mse(a, b), rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(NnError::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let emit = |v: Var, g: Tensor, grads: &mut Vec<Option<Tensor>>| -> Result<()> {
                match grads[v.0].as_mut() {
                    Some(acc) => acc.add_assign(&g)?,
                    None => grads[v.0] = Some(g),
                }
                Ok(())
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                    let g = kernels::conv2d_backward(self.value(*x), self.value(*w), &dy, *stride, *pad, need)?;
                    if let Some(dx) = g.dx {
                        emit(*x, dx, &mut grads)?;
                    }
                    if let Some(dw) = g.dw {
                        emit(*w, dw, &mut grads)?;
                    }
                    if let (Some(b), Some(db)) = (b, g.db) {
                        emit(*b, db, &mut grads)?;
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let negate = matches!(node.op, Op::Sub(..));
                    if self.rg(*a) {
                        emit(*a, kernels::reduce_to(&dy, self.value(*a).shape())?, &mut grads)?;
                    }
                    if self.rg(*b) {
                        let gb = kernels::reduce_to(&dy, self.value(*b).shape())?;
                        emit(*b, if negate { gb.scale(-1.0) } else { gb }, &mut grads)?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let ga = kernels::broadcast_binary(&dy, self.value(*b), |g, y| g * y)?;
                        emit(*a, ga, &mut grads)?;
                    }
                    if self.rg(*b) {
                        let gb = kernels::reduce_to(
                            &dy.zip_map(self.value(*a), |g, x| g * x)?,
                            self.value(*b).shape(),
                        )?;
                        emit(*b, gb, &mut grads)?;
                    }
                }
                Op::Scale(x, k) => {
                    if self.rg(*x) {
                        emit(*x, dy.scale(*k), &mut grads)?;
                    }
                }
                Op::Silu(x) => {
                    if self.rg(*x) {
                        emit(*x, kernels::silu_backward(self.value(*x), &dy)?, &mut grads)?;
                    }
                }
                Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                    let g = kernels::group_norm_backward(
                        self.value(*x),
                        self.value(*gamma),
                        mean,
                        rstd,
                        *groups,
                        &dy,
                    )?;
                    if self.rg(*x) {
                        emit(*x, g.dx, &mut grads)?;
                    }
                    if self.rg(*gamma) {
                        emit(*gamma, g.dgamma, &mut grads)?;
                    }
                    if self.rg(*beta) {
                        emit(*beta, g.dbeta, &mut grads)?;
                    }
                }
                Op::Cat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let c = self.value(*p).shape()[1];
                        if self.rg(*p) {
                            emit(*p, dy.narrow_channels(start, start + c)?, &mut grads)?;
                        }
                        start += c;
                    }
                }
                Op::Upsample2x(x) => {
                    if self.rg(*x) {
                        emit(*x, kernels::upsample_nearest2x_backward(&dy), &mut grads)?;
                    }
                }
                Op::AvgPool2x(x) => {
                    if self.rg(*x) {
                        emit(*x, kernels::avg_pool2x_backward(&dy), &mut grads)?;
                    }
                }
                Op::Mse(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let k = 2.0 * dy.data()[0] / va.numel().max(1) as f32;
                    let diff = va.zip_map(vb, |x, y| (x - y) * k)?;
                    if self.rg(*b) {
                        emit(*b, diff.scale(-1.0), &mut grads)?;
                    }
                    if self.rg(*a) {
                        emit(*a, diff, &mut grads)?;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Graph::backward`]; only leaves keep theirs.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for every trainable parameter bound in `graph`, by name.
    /// Parameters that did not influence the loss get a zero gradient.
    pub fn named(&self, graph: &Graph) -> Vec<(String, Tensor)> {
        graph
            .trainable_params()
            .iter()
            .map(|(name, v)| {
                let g = self
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(*v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}
