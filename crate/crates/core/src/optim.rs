//! Adam with bias-corrected moment estimates.
//!
//! Per element, at step `t` (counting from 1):
//!
//! ```text
//! m     = beta1 * m + (1 - beta1) * g
//! v     = beta2 * v + (1 - beta2) * g^2
//! m_hat = m / (1 - beta1^t)
//! v_hat = v / (1 - beta2^t)
//! theta = theta - lr * m_hat / (sqrt(v_hat) + eps)
//! ```
//!
//! `eps` is added outside the square root. There is no weight decay.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::GradientSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::Config(format!(
                "betas must lie in [0, 1), got beta1={} beta2={}",
                self.beta1, self.beta2
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T = f32> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// First and second moments per parameter name, plus the shared step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    step: u64,
    moments: IndexMap<String, Moments<T>>,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: IndexMap::new(),
        }
    }

    /// Number of completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<&Moments<T>> {
        self.moments.get(name)
    }

    /// `(m_hat, v_hat)` for one parameter at the current step.
    pub fn bias_corrected(&self, name: &str, cfg: &AdamConfig) -> Option<(Tensor<T>, Tensor<T>)> {
        if self.step == 0 {
            return None;
        }
        let mo = self.moments.get(name)?;
        let (bc1, bc2) = bias_corrections::<T>(cfg, self.step);
        Some((mo.m.map(|m| m / bc1), mo.v.map(|v| v / bc2)))
    }
}

fn bias_corrections<T: Scalar>(cfg: &AdamConfig, step: u64) -> (T, T) {
    let t = i32::try_from(step).unwrap_or(i32::MAX);
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    (T::one() - b1.powi(t), T::one() - b2.powi(t))
}

/// One Adam update of every parameter in `params`.
///
/// `grads` must cover exactly the parameters given, with matching shapes and
/// finite values. Everything is validated before anything is modified, so on
/// error the parameters and state are untouched.
pub fn adam_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    grads: &GradientSet<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    let params: Vec<(&str, &mut Tensor<T>)> = params.into_iter().collect();
    for (name, p) in &params {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Alignment(format!("no gradient for parameter {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::Alignment(format!(
                "gradient for {name} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::domain(
                "adam_step",
                format!("gradient for {name} contains non-finite values"),
            ));
        }
        match state.moments.get(*name) {
            Some(mo) if mo.m.shape() != p.shape() => {
                return Err(Error::Alignment(format!(
                    "optimizer moments for {name} have shape {:?}, parameter has {:?}",
                    mo.m.shape(),
                    p.shape()
                )))
            }
            None if state.step > 0 => {
                return Err(Error::Alignment(format!(
                    "parameter {name} has no optimizer state after {} steps",
                    state.step
                )))
            }
            _ => {}
        }
    }
    if grads.len() != params.len() {
        let extra: Vec<&str> = grads
            .names()
            .filter(|n| !params.iter().any(|(p, _)| p == n))
            .collect();
        return Err(Error::Alignment(format!(
            "gradients for unknown parameters: {extra:?}"
        )));
    }

    state.step += 1;
    let (bc1, bc2) = bias_corrections::<T>(cfg, state.step);
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let lr = T::from_f64_lossy(cfg.learning_rate);
    let eps = T::from_f64_lossy(cfg.epsilon);
    for (name, p) in params {
        let g = grads.get(name).expect("checked above");
        let mo = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()).expect("parameter shape"),
                v: Tensor::zeros(p.shape()).expect("parameter shape"),
            });
        let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
        for (((theta, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Configuration and state bundled for the training loop.
#[derive(Debug, Clone)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: AdamState::new(),
        })
    }

    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
        grads: &GradientSet<T>,
    ) -> Result<()> {
        adam_step(params, grads, &mut self.state, &self.config)
    }

    pub fn timestep(&self) -> u64 {
        self.state.step()
    }
}
