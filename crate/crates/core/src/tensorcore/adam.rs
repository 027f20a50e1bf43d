use super::params::ParamStore;
use super::tensor::Element;
use crate::error::{Error, Result};

/// Adam with bias-corrected moments and classic L2 (decay folded into the
/// gradient as `weight_decay * param` for parameters flagged `decay`).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Element = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        Self::with_betas(params, lr, 0.9, 0.999, 1e-8, weight_decay)
    }

    pub fn with_betas(
        params: &ParamStore<T>,
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        weight_decay: f64,
    ) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        AdamState {
            lr,
            beta1,
            beta2,
            epsilon,
            weight_decay,
            step_count: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    /// One update from the gradients currently held by `params`. Parameters
    /// without a gradient buffer took no part in the step and are skipped:
    /// their values, moments and weight decay are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if self.first_moment.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "state tracks {} parameters, store has {}",
                    self.first_moment.len(),
                    params.len()
                ),
            ));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one, lr, eps, wd) = (
            T::one(),
            T::from_f64(self.lr),
            T::from_f64(self.epsilon),
            T::from_f64(self.weight_decay),
        );
        let (bc1, bc2) = (T::from_f64(bc1), T::from_f64(bc2));
        for ((p, m), v) in params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            if m.len() != p.tensor.numel() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "moment size {} for parameter {} of {}",
                        m.len(),
                        p.name,
                        p.tensor.numel()
                    ),
                ));
            }
            let Some(grad) = p.tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let decay = p.decay && self.weight_decay != 0.0;
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let mut g = grad[i];
                if decay {
                    g = g + wd * data[i];
                }
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
