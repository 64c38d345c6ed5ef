use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// First/second moment estimates for a list of parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    /// Zeroed moments shaped like `params`, with the usual defaults
    /// (0.9, 0.999, 1e-8).
    pub fn new(params: &[&Tensor<T>]) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &[&Tensor<T>], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Element>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.first.len()),
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("param {:?}, grad {:?}, moment {:?}", p.shape(), g.shape(), m.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (T::from_f64(state.beta1), T::from_f64(state.beta2));
    let one = T::one();
    let bc1 = T::from_f64(1.0 - state.beta1.powf(t));
    let bc2 = T::from_f64(1.0 - state.beta2.powf(t));
    let lr = T::from_f64(lr);
    let eps = T::from_f64(state.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
