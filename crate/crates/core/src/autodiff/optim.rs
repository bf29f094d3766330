use crate::scalar::Real;

use super::{AutodiffError, ParamStore, Tensor};

/// Adam with bias correction and a constant learning rate.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(lr: T) -> Self {
        Self::with_betas(lr, T::lit(0.9), T::lit(0.999), T::lit(1e-8))
    }

    pub fn with_betas(lr: T, beta1: T, beta2: T, eps: T) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter, then clears the gradients.
    pub fn adam_step(&mut self, store: &mut ParamStore<T>) -> Result<(), AutodiffError> {
        if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
            return Err(AutodiffError::MissingGrad(p.name.clone()));
        }
        if self.first.is_empty() {
            self.first = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != store.len() {
            return Err(AutodiffError::Shape(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let g = p.grad.take().expect("checked above");
            if !g.is_finite() {
                return Err(AutodiffError::NonFinite(format!("gradient of {}", p.name)));
            }
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (T::one() - self.beta1) * gi;
                *vi = self.beta2 * *vi + (T::one() - self.beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
