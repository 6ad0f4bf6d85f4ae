use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Scalar;
use crate::numerics::trace::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::InvalidHyperparameter {
            name: "learning rate",
            value: lr,
        });
    }
    Ok(())
}

impl Adam {
    /// One bias-corrected Adam update of every slot in `params`.
    pub fn step<T: Scalar>(&self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        check_lr(lr)?;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let eps = T::from_f64_lossy(self.epsilon);
        for slot in params.slots_mut() {
            slot.step += 1;
            let t = slot.step as i32;
            let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
            let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
            let step_size = T::from_f64_lossy(lr) / c1;
            let value = slot.value.data_mut();
            let grad = slot.grad.data();
            let m = slot.first_moment.data_mut();
            let v = slot.second_moment.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let denom = (v[i] / c2).sqrt() + eps;
                value[i] = value[i] - step_size * m[i] / denom;
            }
        }
        Ok(())
    }
}

/// Plain gradient descent: `value -= lr * grad`.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, lr: f64) -> Result<()> {
    check_lr(lr)?;
    let lr = T::from_f64_lossy(lr);
    for slot in params.slots_mut() {
        slot.step += 1;
        let grad = slot.grad.data().to_vec();
        for (v, g) in slot.value.data_mut().iter_mut().zip(grad) {
            *v = *v - lr * g;
        }
    }
    Ok(())
}
