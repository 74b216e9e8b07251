use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for a fixed, ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    ///
    /// Every gradient is checked before any parameter moves; a non-finite
    /// entry aborts the step and names the offending parameter.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], names: &[String], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be non-negative, got {lr}")));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter {i} is {:?}, gradient {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    parameter: names.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
                });
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len() {
            return Err(Error::InvalidArgument("parameter list changed between Adam steps".into()));
        }

        self.step += 1;
        let b1 = T::lit(self.config.beta1);
        let b2 = T::lit(self.config.beta2);
        let eps = T::lit(self.config.eps);
        let lr = T::lit(lr);
        let t = self.step as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let pd = p.data_mut();
            for k in 0..pd.len() {
                let gk = g.data()[k];
                let mk = b1 * m.data()[k] + (T::one() - b1) * gk;
                let vk = b2 * v.data()[k] + (T::one() - b2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let mhat = mk / c1;
                let vhat = vk / c2;
                pd[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step<T: Scalar>(
    state: &mut AdamState<T>,
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    names: &[String],
    lr: f64,
) -> Result<()> {
    state.step(params, grads, names, lr)
}
