//! Adam with bias correction and the polynomial learning-rate schedule.

use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Default decay exponent of [`poly_lr`].
pub const DEFAULT_POLY_POWER: f64 = 0.9;

/// `lr0 · (1 − epoch/epochs)^power`.
pub fn poly_lr(epoch: usize, epochs: usize, base_lr: f64, power: f64) -> Result<f64> {
    ensure!(epoch < epochs, "epoch {epoch} out of range for a {epochs}-epoch schedule");
    Ok(base_lr * libm::pow(1.0 - epoch as f64 / epochs as f64, power))
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    first: Tensor,
    second: Tensor,
    steps: u64,
}

/// Adam state: moment buffers and step count per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: Vec<Option<Moments>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, moments: Vec::new() }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Steps taken for parameter `index` (0 if never updated).
    pub fn steps(&self, index: usize) -> u64 {
        self.moments.get(index).and_then(|m| m.as_ref()).map_or(0, |m| m.steps)
    }

    pub fn first_moment(&self, index: usize) -> Option<&Tensor> {
        self.moments.get(index).and_then(|m| m.as_ref()).map(|m| &m.first)
    }

    pub fn second_moment(&self, index: usize) -> Option<&Tensor> {
        self.moments.get(index).and_then(|m| m.as_ref()).map(|m| &m.second)
    }

    /// Updates one tensor in place from its gradient.
    pub fn step_tensor(&mut self, index: usize, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        ensure!(
            param.shape() == grad.shape(),
            "gradient shape {:?} does not match parameter shape {:?}",
            grad.shape(),
            param.shape()
        );
        if self.moments.len() <= index {
            self.moments.resize(index + 1, None);
        }
        let m = self.moments[index].get_or_insert_with(|| Moments {
            first: Tensor::zeros(param.shape()),
            second: Tensor::zeros(param.shape()),
            steps: 0,
        });
        m.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - libm::pow(b1, m.steps as f64);
        let c2 = 1.0 - libm::pow(b2, m.steps as f64);
        let iter = param.data_mut().iter_mut().zip(grad.data()).zip(m.first.data_mut().iter_mut().zip(m.second.data_mut()));
        for ((p, &g), (m1, m2)) in iter {
            *m1 = b1 * *m1 + (1.0 - b1) * g;
            *m2 = b2 * *m2 + (1.0 - b2) * g * g;
            let m_hat = *m1 / c1;
            let v_hat = *m2 / c2;
            *p -= lr * m_hat / (libm::sqrt(v_hat) + self.eps);
        }
        Ok(())
    }

    /// Applies one update to every parameter that has a gradient; parameters
    /// without one are left untouched.
    pub fn step<'g>(
        &mut self,
        store: &mut ParamStore,
        grads: impl Fn(crate::nn::ParamId) -> Option<&'g Tensor>,
        lr: f64,
    ) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if let Some(g) = grads(id) {
                self.step_tensor(id.index(), store.get_mut(id), g, lr)?;
            }
        }
        Ok(())
    }
}
