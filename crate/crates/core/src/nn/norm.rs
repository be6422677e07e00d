//! Instance normalization and fixed per-channel input standardization.

use super::GradStore;
use crate::data::NormStats;
use ndarray::{s, Array1, Array2, Array4, ArrayViewD, ArrayViewMutD};

/// Per-sample, per-channel normalization over the spatial axes with a learned
/// affine output.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
    pub(crate) slot_g: usize,
    pub(crate) slot_b: usize,
}

#[derive(Debug)]
pub struct NormCache {
    x_hat: Array4<f64>,
    inv_std: Array2<f64>,
}

impl InstanceNorm {
    pub fn new(channels: usize) -> Self {
        InstanceNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            eps: 1e-5,
            slot_g: usize::MAX,
            slot_b: usize::MAX,
        }
    }

    pub(crate) fn assign_slots(&mut self, next: &mut usize) {
        self.slot_g = *next;
        self.slot_b = *next + 1;
        *next += 2;
    }

    pub(crate) fn init_params(&mut self) {
        self.gamma.fill(1.0);
        self.beta.fill(0.0);
    }

    pub(crate) fn collect_params<'a>(
        &'a self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewD<'a, f64>)>,
    ) {
        out.push((format!("{prefix}.gamma"), self.gamma.view().into_dyn()));
        out.push((format!("{prefix}.beta"), self.beta.view().into_dyn()));
    }

    pub(crate) fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    ) {
        out.push((format!("{prefix}.gamma"), self.gamma.view_mut().into_dyn()));
        out.push((format!("{prefix}.beta"), self.beta.view_mut().into_dyn()));
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array4<f64>) -> (Array4<f64>, NormCache) {
        let (n, c, h, w) = x.dim();
        let m = (h * w) as f64;
        let plane_len = h * w;
        let mut x_hat = Array4::zeros((n, c, h, w));
        let mut inv_std = Array2::zeros((n, c));
        let mut y = Array4::zeros((n, c, h, w));
        let xs = x.as_slice().expect("contiguous");
        let xh = x_hat.as_slice_mut().expect("contiguous");
        let ys = y.as_slice_mut().expect("contiguous");
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane_len;
                let plane = &xs[off..off + plane_len];
                let mean = plane.iter().sum::<f64>() / m;
                let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let inv = 1.0 / (var + self.eps).sqrt();
                inv_std[[i, ch]] = inv;
                let (g, b) = (self.gamma[ch], self.beta[ch]);
                for k in 0..plane_len {
                    let xhv = (plane[k] - mean) * inv;
                    xh[off + k] = xhv;
                    ys[off + k] = g * xhv + b;
                }
            }
        }
        (y, NormCache { x_hat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &NormCache,
        grad_out: &Array4<f64>,
        grads: Option<&mut GradStore>,
    ) -> Array4<f64> {
        let (n, c, h, w) = grad_out.dim();
        let m = (h * w) as f64;
        let plane_len = h * w;
        let mut dx = Array4::zeros((n, c, h, w));
        let mut dgamma = Array1::<f64>::zeros(c);
        let mut dbeta = Array1::<f64>::zeros(c);
        let gs = grad_out.as_slice().expect("contiguous");
        let xhs = cache.x_hat.as_slice().expect("contiguous");
        let dxs = dx.as_slice_mut().expect("contiguous");
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane_len;
                let dy = &gs[off..off + plane_len];
                let xh = &xhs[off..off + plane_len];
                let inv = cache.inv_std[[i, ch]];
                let g = self.gamma[ch];
                let sum_dy: f64 = dy.iter().sum();
                let sum_dy_xh: f64 = dy.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum();
                dgamma[ch] += sum_dy_xh;
                dbeta[ch] += sum_dy;
                let dxo = &mut dxs[off..off + plane_len];
                for k in 0..plane_len {
                    dxo[k] = g * inv * (dy[k] - (sum_dy + xh[k] * sum_dy_xh) / m);
                }
            }
        }
        if let Some(store) = grads {
            *store.slot_mut(self.slot_g) += &dgamma.into_dyn();
            *store.slot_mut(self.slot_b) += &dbeta.into_dyn();
        }
        dx
    }
}

/// Fixed per-channel standardization `(x - mean) / std`, the model-internal
/// preprocessing applied before the first convolution.
#[derive(Debug, Clone)]
pub struct Normalize {
    pub stats: NormStats,
}

impl Normalize {
    pub fn new(stats: NormStats) -> Self {
        Normalize { stats }
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut y = x.clone();
        for c in 0..3 {
            let mean = self.stats.mean[c];
            let std = self.stats.std[c];
            y.slice_mut(s![.., c, .., ..]).mapv_inplace(|v| (v - mean) / std);
        }
        y
    }

    pub fn backward(&self, grad_out: &Array4<f64>) -> Array4<f64> {
        let mut dx = grad_out.clone();
        for c in 0..3 {
            let std = self.stats.std[c];
            dx.slice_mut(s![.., c, .., ..]).mapv_inplace(|v| v / std);
        }
        dx
    }
}
