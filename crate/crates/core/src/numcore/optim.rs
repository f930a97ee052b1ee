use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// AdamW state: bias-corrected moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState<T = f64> {
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
    pub learning_rate: T,
    pub weight_decay: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> OptimState<T> {
    /// Accumulators shaped after `params`, with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(params: &[&Tensor<T>], learning_rate: T, weight_decay: T) -> Self {
        Self {
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            learning_rate,
            weight_decay,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            epsilon: T::lit(1e-8),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable block. Blocks with `trainable[i] == false`
    /// are left bit-identical and their moments untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], trainable: &[bool]) -> Result<()> {
        let n = self.first.len();
        if params.len() != n || grads.len() != n || trainable.len() != n {
            return Err(Error::shape(
                "optimizer blocks",
                &[n],
                &[params.len(), grads.len(), trainable.len()],
            ));
        }
        for i in 0..n {
            params[i].ensure_shape(self.first[i].shape(), &format!("param block {i}"))?;
            grads[i].ensure_shape(self.first[i].shape(), &format!("grad block {i}"))?;
            if trainable[i] && !grads[i].is_finite() {
                return Err(Error::NonFinite(format!("gradient block {i}")));
            }
        }
        self.step += 1;
        let t = T::lit(self.step as f64);
        let bc1 = T::one() - self.beta1.powf(t);
        let bc2 = T::one() - self.beta2.powf(t);
        let (b1, b2, lr, wd, eps) = (self.beta1, self.beta2, self.learning_rate, self.weight_decay, self.epsilon);
        for i in (0..n).filter(|&i| trainable[i]) {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = params[i].data_mut();
            for (((pj, &gj), mj), vj) in p.iter_mut().zip(grads[i].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = b1 * *mj + (T::one() - b1) * gj;
                *vj = b2 * *vj + (T::one() - b2) * gj * gj;
                let m_hat = *mj / bc1;
                let v_hat = *vj / bc2;
                *pj = *pj - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *pj);
            }
        }
        Ok(())
    }
}
