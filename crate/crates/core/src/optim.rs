//! AdamW with decoupled weight decay, plus global-norm clipping.

use crate::error::{Error, Result};
use crate::gradcheck::ParamStore;
use crate::graph::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 4.5e-4,
            beta1: 0.9,
            beta2: 0.96,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::range("train.lr", self.lr, "(0, inf)"));
        }
        for (name, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::range(name, b, "[0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::range("train.eps", self.eps, "(0, inf)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::range("train.weight_decay", self.weight_decay, "[0, inf)"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new<P: ParamStore>(params: &P) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One AdamW update. Parameters without a gradient entry are treated as
/// having zero gradient (they still decay).
pub fn optimizer_step<P: ParamStore>(
    params: &mut P,
    grads: &Gradients,
    state: &mut OptimizerState,
    hyper: &AdamW,
) -> Result<()> {
    let tensors = params.tensors_mut();
    if tensors.len() != state.m.len() {
        return Err(Error::shape(
            "optimizer",
            format!("{} parameter tensors but state holds {}", tensors.len(), state.m.len()),
        ));
    }
    for (id, g) in grads.iter() {
        match tensors.get(*id) {
            Some(p) if p.shape() == g.shape() => {}
            Some(p) => {
                return Err(Error::shape(
                    "optimizer",
                    format!("gradient {id} has shape {:?}, parameter {:?}", g.shape(), p.shape()),
                ))
            }
            None => return Err(Error::shape("optimizer", format!("gradient for unknown parameter {id}"))),
        }
    }
    state.step += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.step as i32);
    for (i, p) in tensors.iter_mut().enumerate() {
        let g = grads.get(i).map(Tensor::data);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g[j]);
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gj;
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= hyper.lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * *w);
        }
    }
    Ok(())
}

/// Rescale so the global L2 norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}
