use super::params::ParamSet;
use crate::error::{Error, Result};

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self::with_betas(learning_rate, weight_decay, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(learning_rate: f64, weight_decay: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1,
            beta2,
            epsilon,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.weight_decay >= 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "AdamW lr={} wd={} betas=({}, {}) eps={}",
                self.learning_rate, self.weight_decay, self.beta1, self.beta2, self.epsilon
            )))
        }
    }

    /// Moment buffers, index-aligned with the parameter set.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first_moment, &self.second_moment)
    }

    /// Updates every parameter that requires grad. Each such parameter must
    /// carry a gradient buffer.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        self.validate()?;
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, set has {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in params.iter().enumerate() {
            if t.requires_grad() && t.grad().is_none() {
                return Err(Error::Contract(format!("parameter {name} has no gradient")));
            }
            if self.first_moment[i].len() != t.len() {
                return Err(Error::Contract(format!("moment buffer misaligned with parameter {name}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, wd, b1, b2, eps) = (self.learning_rate, self.weight_decay, self.beta1, self.beta2, self.epsilon);
        for (i, (_, tensor)) in params.iter_mut().enumerate() {
            if !tensor.requires_grad() {
                continue;
            }
            let grad = tensor.grad().expect("checked above").to_vec();
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (j, w) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                *w -= lr * wd * *w;
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
