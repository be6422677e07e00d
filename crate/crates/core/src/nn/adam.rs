//! Adaptive-moment gradient descent over slot-aligned parameters.

use super::GradStore;
use ndarray::{ArrayD, ArrayViewMutD};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    /// Moment buffers are shaped from a zeroed gradient store.
    pub fn new(lr: f64, beta1: f64, beta2: f64, template: &GradStore) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: template.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect(),
            v: template.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect(),
        }
    }

    /// One bias-corrected update. `params` must be in slot order.
    pub fn step(&mut self, params: &mut [(String, ArrayViewMutD<'_, f64>)], grads: &GradStore) {
        assert_eq!(params.len(), grads.len(), "param/grad slot mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, (_, param)) in params.iter_mut().enumerate() {
            let g = grads.slot(slot);
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            ndarray::Zip::from(param.view_mut())
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        // With bias correction the very first update is lr * sign(g).
        let shapes = vec![ndarray::IxDyn(&[2])];
        let mut store = GradStore::zeros_like(&shapes);
        store.slot_mut(0)[[0]] = 0.3;
        store.slot_mut(0)[[1]] = -2.0;
        let mut param = ArrayD::zeros(ndarray::IxDyn(&[2]));
        let mut adam = Adam::new(0.1, 0.5, 0.999, &store);
        {
            let mut params = vec![("p".to_string(), param.view_mut())];
            adam.step(&mut params, &store);
        }
        assert!((param[[0]] + 0.1).abs() < 1e-6);
        assert!((param[[1]] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_identity() {
        let shapes = vec![ndarray::IxDyn(&[3])];
        let mut store = GradStore::zeros_like(&shapes);
        store.slot_mut(0).fill(1.0);
        let mut param = ArrayD::from_elem(ndarray::IxDyn(&[3]), 0.5);
        let before = param.clone();
        let mut adam = Adam::new(0.0, 0.5, 0.999, &store);
        let mut params = vec![("p".to_string(), param.view_mut())];
        adam.step(&mut params, &store);
        drop(params);
        assert_eq!(param, before);
    }
}
