//! Fully connected head acting on spatially pooled (N, C, 1, 1) activations.

use super::GradStore;
use ndarray::{Array1, Array2, Array4, ArrayViewD, ArrayViewMutD};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Linear {
    /// (out_features, in_features)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub(crate) slot_w: usize,
    pub(crate) slot_b: usize,
}

#[derive(Debug)]
pub struct LinearCache {
    x2: Array2<f64>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Linear {
            weight: Array2::zeros((out_features, in_features)),
            bias: Array1::zeros(out_features),
            slot_w: usize::MAX,
            slot_b: usize::MAX,
        }
    }

    pub(crate) fn assign_slots(&mut self, next: &mut usize) {
        self.slot_w = *next;
        self.slot_b = *next + 1;
        *next += 2;
    }

    pub(crate) fn init_params(&mut self, rng: &mut ChaCha8Rng) {
        let fan_in = self.weight.dim().1 as f64;
        let bound = 1.0 / fan_in.sqrt();
        for v in self.weight.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
        for v in self.bias.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
    }

    pub(crate) fn collect_params<'a>(
        &'a self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewD<'a, f64>)>,
    ) {
        out.push((format!("{prefix}.weight"), self.weight.view().into_dyn()));
        out.push((format!("{prefix}.bias"), self.bias.view().into_dyn()));
    }

    pub(crate) fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    ) {
        out.push((format!("{prefix}.weight"), self.weight.view_mut().into_dyn()));
        out.push((format!("{prefix}.bias"), self.bias.view_mut().into_dyn()));
    }

    fn to_2d(x: &Array4<f64>) -> Array2<f64> {
        let (n, c, h, w) = x.dim();
        assert!(h == 1 && w == 1, "linear expects pooled input");
        x.view().into_shape_with_order((n, c)).expect("contiguous").to_owned()
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array4<f64>) -> (Array4<f64>, LinearCache) {
        let x2 = Self::to_2d(x);
        let mut y = x2.dot(&self.weight.t());
        for mut row in y.rows_mut() {
            row += &self.bias;
        }
        let (n, k) = y.dim();
        let y4 = y.into_shape_with_order((n, k, 1, 1)).expect("contiguous");
        (y4, LinearCache { x2 })
    }

    pub fn backward(
        &self,
        cache: &LinearCache,
        grad_out: &Array4<f64>,
        grads: Option<&mut GradStore>,
    ) -> Array4<f64> {
        let g2 = Self::to_2d(grad_out);
        if let Some(store) = grads {
            let dw = g2.t().dot(&cache.x2);
            *store.slot_mut(self.slot_w) += &dw.into_dyn();
            let db = g2.sum_axis(ndarray::Axis(0));
            *store.slot_mut(self.slot_b) += &db.into_dyn();
        }
        let dx = g2.dot(&self.weight);
        let (n, c) = dx.dim();
        dx.into_shape_with_order((n, c, 1, 1)).expect("contiguous")
    }
}
