//! ADAM optimizer with a step-decay learning-rate schedule and optional
//! per-parameter update masks (used to freeze the score head or everything
//! but the score head).

use ndarray::Array2;

use super::params::ParamStore;
use super::tape::Gradients;

pub struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Adam {
        let m = (0..store.len())
            .map(|i| Array2::zeros(store.value(i).dim()))
            .collect();
        let v = (0..store.len())
            .map(|i| Array2::zeros(store.value(i).dim()))
            .collect();
        Adam {
            m,
            v,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update step. Parameters whose mask entry is false (or whose
    /// gradient is absent) are left bit-identical.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        lr: f64,
        mask: Option<&[bool]>,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for idx in 0..store.len() {
            if let Some(mask) = mask {
                if !mask[idx] {
                    continue;
                }
            }
            let Some(g) = grads.by_param[idx].as_ref() else {
                continue;
            };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(m).and(g).for_each(|mi, &gi| {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            });
            ndarray::Zip::from(v).and(g).for_each(|vi, &gi| {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            });
            let value = store.value_mut(idx);
            ndarray::Zip::from(value)
                .and(&self.m[idx])
                .and(&self.v[idx])
                .for_each(|w, &mi, &vi| {
                    let m_hat = mi / bc1;
                    let v_hat = vi / bc2;
                    *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }
}

/// Step decay: the base rate up to and including `decay_epoch`, divided by
/// `factor` afterwards. Epochs are 1-based.
#[derive(Debug, Clone, Copy)]
pub struct StepDecay {
    pub base_lr: f64,
    pub decay_epoch: u32,
    pub factor: f64,
}

impl StepDecay {
    pub fn lr_at_epoch(&self, epoch: u32) -> f64 {
        if epoch > self.decay_epoch {
            self.base_lr / self.factor
        } else {
            self.base_lr
        }
    }
}
