use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A learnable tensor together with its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill_zero();
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            value: self.value.cast(),
            grad: self.grad.cast(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter, in the order the parameters are
/// handed to [`adam_step`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub first_moment: Vec<Tensor<f32>>,
    pub second_moment: Vec<Tensor<f32>>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &[&mut Param<f32>], config: AdamConfig) -> Self {
        let first_moment = params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect::<Vec<_>>();
        AdamState {
            second_moment: first_moment.clone(),
            first_moment,
            step_count: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update. Gradients are left in place; callers
/// zero them before the next step. Nothing is written if any updated value
/// would be non-finite.
pub fn adam_step(
    params: &mut [&mut Param<f32>],
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params but state tracks {}",
                params.len(),
                state.first_moment.len()
            ),
        ));
    }
    for (p, m) in params.iter().zip(&state.first_moment) {
        if p.value.shape() != m.shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "param {} has shape {:?}, moment {:?}",
                    p.name,
                    p.value.shape(),
                    m.shape()
                ),
            ));
        }
        if !p.grad.is_finite() {
            return Err(Error::Numeric {
                what: format!("gradient of {}", p.name),
            });
        }
    }

    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step_count + 1;
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);

    let mut staged = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        let m_old = state.first_moment[i].data();
        let v_old = state.second_moment[i].data();
        let mut m_new = Vec::with_capacity(m_old.len());
        let mut v_new = Vec::with_capacity(m_old.len());
        let mut value = Vec::with_capacity(m_old.len());
        for (((&g, &m), &v), &x) in p
            .grad
            .data()
            .iter()
            .zip(m_old)
            .zip(v_old)
            .zip(p.value.data())
        {
            let g = g as f64;
            let m = beta1 * m as f64 + (1.0 - beta1) * g;
            let v = beta2 * v as f64 + (1.0 - beta2) * g * g;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            let updated = x as f64 - learning_rate * m_hat / (v_hat.sqrt() + eps);
            m_new.push(m as f32);
            v_new.push(v as f32);
            value.push(updated as f32);
        }
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                what: format!("Adam update of {}", p.name),
            });
        }
        staged.push((m_new, v_new, value));
    }

    for (i, (m, v, value)) in staged.into_iter().enumerate() {
        state.first_moment[i].data_mut().copy_from_slice(&m);
        state.second_moment[i].data_mut().copy_from_slice(&v);
        params[i].value.data_mut().copy_from_slice(&value);
    }
    state.step_count = t;
    Ok(())
}
