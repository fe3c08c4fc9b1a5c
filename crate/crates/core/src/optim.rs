//! Adam optimizer.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("gradient count {grads} does not match parameter count {params}")]
    Count { params: usize, grads: usize },
    #[error("gradient for {name} has shape {found:?}, parameter has {expected:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("non-finite gradient for {name}")]
    NonFinite { name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[Array2<T>]) -> Self {
        Self {
            config,
            m: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            t: 0,
        }
    }
}

/// One Adam update of every parameter, in place.
///
/// All gradients are checked before anything is modified, so a failed step
/// leaves parameters and state untouched.
pub fn adam_step<T: Scalar>(
    params: &mut [Array2<T>],
    grads: &[Array2<T>],
    names: &[String],
    state: &mut AdamState<T>,
) -> Result<(), OptimError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(OptimError::Count {
            params: params.len(),
            grads: grads.len(),
        });
    }
    let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dim() != g.dim() || state.m[i].dim() != p.dim() {
            return Err(OptimError::Shape {
                name: name(i),
                expected: p.dim(),
                found: g.dim(),
            });
        }
        if !g.iter().all(|x| x.is_finite()) {
            return Err(OptimError::NonFinite { name: name(i) });
        }
    }

    state.t += 1;
    let c = state.config;
    let b1 = T::from_f64(c.beta1);
    let b2 = T::from_f64(c.beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - c.beta1.powi(state.t as i32));
    let bc2 = T::from_f64(1.0 - c.beta2.powi(state.t as i32));
    let lr = T::from_f64(c.lr);
    let eps = T::from_f64(c.eps);
    for (i, p) in params.iter_mut().enumerate() {
        Zip::from(p)
            .and(&grads[i])
            .and(&mut state.m[i])
            .and(&mut state.v[i])
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}
