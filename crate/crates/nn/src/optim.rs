use std::collections::HashMap;

use crate::store::ParamStore;
use crate::tensor::Tensor;
use crate::{NnError, Result};

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(String, Tensor)], max_norm: f32) -> f32 {
    let norm = grads.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            *g = g.scale(k);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// Heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
    Momentum { lr: f32, momentum: f32 },
    Adam { lr: f32, beta1: f32, beta2: f32, eps: f32 },
}

pub struct Optimizer {
    kind: OptimizerKind,
    first: HashMap<String, Tensor>,
    second: HashMap<String, Tensor>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, first: HashMap::new(), second: HashMap::new(), steps: 0 }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Tensor)]) -> Result<()> {
        self.steps += 1;
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| NnError::MissingParam(name.clone()))?;
            p.expect_shape(g.shape())?;
            match self.kind {
                OptimizerKind::Momentum { lr, momentum } => {
                    let v = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                        *vv = momentum * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
                OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                    let m = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let bc1 = 1.0 - beta1.powi(self.steps as i32);
                    let bc2 = 1.0 - beta2.powi(self.steps as i32);
                    for (((pv, mv), vv), &gv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        *pv -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
