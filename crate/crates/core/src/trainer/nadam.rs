//! NAdam in the form popularised by PyTorch:
//!
//! ```text
//! mu_t      = b1 (1 - 0.5 * 0.96^(t * psi))
//! m_t       = b1 m_{t-1} + (1 - b1) g
//! v_t       = b2 v_{t-1} + (1 - b2) g^2
//! denom     = sqrt(v_t / (1 - b2^t)) + eps
//! p_t       = p_{t-1} - lr (1 - mu_t) / (1 - prod_{i<=t} mu_i) * g / denom
//!                     - lr mu_{t+1} / (1 - prod_{i<=t+1} mu_i) * m_t / denom
//! ```
//!
//! Moment updates and step coefficients are evaluated in f64 regardless of
//! the parameter type.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NAdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum_decay: f64,
}

impl Default for NAdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, momentum_decay: 0.004 }
    }
}

/// Moments for one group of parameters sharing a learning rate.
#[derive(Debug, Clone)]
pub struct NAdamState<T: Scalar> {
    pub config: NAdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
    mu_product: f64,
}

impl<T: Scalar> NAdamState<T> {
    pub fn new(config: NAdamConfig, shapes: &[&[usize]]) -> Self {
        Self {
            config,
            first: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
            step: 0,
            mu_product: 1.0,
        }
    }

    pub fn for_params(config: NAdamConfig, params: &[&Tensor<T>]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        Self::new(config, &shapes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Tensor<T> {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor<T> {
        &self.second[i]
    }

    fn mu(&self, t: u64) -> f64 {
        let c = &self.config;
        c.beta1 * (1.0 - 0.5 * 0.96f64.powf(t as f64 * c.momentum_decay))
    }
}

/// One NAdam update of every parameter in the group.
pub fn nadam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut NAdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::shape(
            "nadam",
            format!("{} params, {} grads, {} moment slots", params.len(), grads.len(), state.first.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(Error::shape("nadam", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
        }
        if !g.all_finite() {
            return Err(Error::non_finite("nadam", format!("gradient of parameter {i}")));
        }
    }
    let c = state.config;
    state.step += 1;
    let t = state.step;
    let mu = state.mu(t);
    let mu_next = state.mu(t + 1);
    state.mu_product *= mu;
    let mu_product_next = state.mu_product * mu_next;
    let bias2 = 1.0 - c.beta2.powf(t as f64);
    let grad_coef = lr * (1.0 - mu) / (1.0 - state.mu_product);
    let mom_coef = lr * mu_next / (1.0 - mu_product_next);

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            let gf = gj.to_f64();
            let mf = c.beta1 * mj.to_f64() + (1.0 - c.beta1) * gf;
            let vf = c.beta2 * vj.to_f64() + (1.0 - c.beta2) * gf * gf;
            *mj = T::from_f64(mf);
            *vj = T::from_f64(vf);
            let denom = (vf / bias2).sqrt() + c.eps;
            let updated = pj.to_f64() - grad_coef * gf / denom - mom_coef * mf / denom;
            *pj = T::from_f64(updated);
        }
        if !p.all_finite() {
            return Err(Error::non_finite("nadam", format!("update of parameter {i}")));
        }
    }
    Ok(())
}
