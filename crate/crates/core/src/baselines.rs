//! Iterative competitor attacks and controls: projected gradient descent,
//! diverse-input momentum, feature dispersion reduction, self-supervised
//! feature distancing, Gaussian noise and Gaussian smoothing.

use crate::error::{Error, Result};
use crate::generator::{project, AttackBudget};
use crate::models::{Classifier, LayerTap};
use crate::nn::{pad, Tensor4};
use ndarray::{s, Array4};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Shared configuration for the iterative attacks.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IterConfig {
    pub budget: AttackBudget,
    /// Step size alpha on the 8-bit scale.
    pub step_8bit: f64,
    pub iterations: usize,
    pub momentum_decay: f64,
    pub transform_prob: f64,
    /// Start from a uniform draw inside the ball instead of the clean image.
    pub random_start: bool,
}

impl IterConfig {
    pub fn new(budget: AttackBudget) -> Self {
        IterConfig {
            budget,
            step_8bit: 4.0,
            iterations: 100,
            momentum_decay: 1.0,
            transform_prob: 0.7,
            random_start: true,
        }
    }

    pub fn step(&self) -> f64 {
        self.step_8bit / 255.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.step_8bit <= 0.0 {
            return Err(Error::InvalidParameter("step size must be positive".into()));
        }
        if self.iterations < 1 {
            return Err(Error::InvalidParameter("iterations must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.transform_prob) {
            return Err(Error::InvalidParameter("transform probability outside [0,1]".into()));
        }
        Ok(())
    }
}

/// Elementwise three-valued sign; exact zeros do not move the iterate.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_finite(g: &Tensor4, iteration: usize) -> Result<()> {
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient(iteration));
    }
    Ok(())
}

fn uniform_ball_start(x: &Tensor4, epsilon: f64, rng: &mut ChaCha8Rng) -> Result<Tensor4> {
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let mut start = x.clone();
    start.mapv_inplace(|xv| xv + rng.random_range(-epsilon..epsilon));
    project(&start, x, epsilon)
}

/// Signed-gradient ascent on cross-entropy from a random start inside the
/// epsilon-ball, projected every iterate.
pub fn pgd_attack(
    model: &Classifier,
    x: &Tensor4,
    labels: &[usize],
    cfg: &IterConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor4> {
    cfg.validate()?;
    let eps = cfg.budget.epsilon;
    let alpha = cfg.step();
    let mut x_adv = if cfg.random_start { uniform_ball_start(x, eps, rng)? } else { x.clone() };
    for t in 0..cfg.iterations {
        let (_, grad) = model.ce_grad_input(&x_adv, labels)?;
        check_finite(&grad, t)?;
        x_adv.zip_mut_with(&grad, |v, &g| *v += alpha * sign(g));
        x_adv = project(&x_adv, x, eps)?;
    }
    Ok(x_adv)
}

/// Momentum-accumulated signed gradients of cross-entropy on stochastically
/// resized-and-padded inputs.
///
/// With `transform_prob = 0` and `momentum_decay = 0` the trajectory is
/// bitwise identical to iterative FGSM.
pub fn dim_attack(
    model: &Classifier,
    x: &Tensor4,
    labels: &[usize],
    cfg: &IterConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor4> {
    cfg.validate()?;
    let eps = cfg.budget.epsilon;
    let alpha = cfg.step();
    let (_, _, h, w) = x.dim();
    let mut x_adv = x.clone();
    let mut momentum = Tensor4::zeros(x.raw_dim());
    for t in 0..cfg.iterations {
        let grad = if cfg.transform_prob > 0.0 && rng.random::<f64>() < cfg.transform_prob {
            // resize to a uniform fraction of the side, pad back randomly
            let frac: f64 = rng.random_range(0.875..1.0);
            let nh = ((h as f64 * frac).round() as usize).max(1);
            let nw = ((w as f64 * frac).round() as usize).max(1);
            let top = rng.random_range(0..=(h - nh));
            let left = rng.random_range(0..=(w - nw));
            let transformed = resize_pad(&x_adv, nh, nw, top, left);
            let (_, g_t) = model.ce_grad_input(&transformed, labels)?;
            resize_pad_backward(&g_t, h, w, nh, nw, top, left)
        } else {
            let (_, g) = model.ce_grad_input(&x_adv, labels)?;
            g
        };
        check_finite(&grad, t)?;
        // per-sample l1 normalization before momentum accumulation
        let n = x.dim().0;
        let mut g_norm = grad;
        for i in 0..n {
            let l1: f64 = g_norm.slice(s![i, .., .., ..]).iter().map(|v| v.abs()).sum();
            if l1 > 0.0 {
                g_norm.slice_mut(s![i, .., .., ..]).mapv_inplace(|v| v / l1);
            }
        }
        momentum.zip_mut_with(&g_norm, |m, &g| *m = cfg.momentum_decay * *m + g);
        x_adv.zip_mut_with(&momentum, |v, &m| *v += alpha * sign(m));
        x_adv = project(&x_adv, x, eps)?;
    }
    Ok(x_adv)
}

/// Iterative minimization of the per-sample standard deviation of the tap
/// features.
pub fn dr_attack(
    model: &Classifier,
    tap: &LayerTap,
    x: &Tensor4,
    cfg: &IterConfig,
) -> Result<Tensor4> {
    cfg.validate()?;
    let eps = cfg.budget.epsilon;
    let alpha = cfg.step();
    let mut x_adv = x.clone();
    for t in 0..cfg.iterations {
        let (f, caches) = model.features_cached(tap, &x_adv)?;
        let grad_f = feature_std_grad(&f);
        let grad = model.grad_input_from_features(tap, &caches, &grad_f)?;
        check_finite(&grad, t)?;
        x_adv.zip_mut_with(&grad, |v, &g| *v -= alpha * sign(g));
        x_adv = project(&x_adv, x, eps)?;
    }
    Ok(x_adv)
}

/// Batch-mean per-sample standard deviation of a feature tensor.
pub fn feature_std(f: &Tensor4) -> f64 {
    let n = f.dim().0;
    let mut total = 0.0;
    for i in 0..n {
        let plane = f.slice(s![i, .., .., ..]);
        let m = plane.len() as f64;
        let mean = plane.sum() / m;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
        total += var.sqrt();
    }
    total / n as f64
}

fn feature_std_grad(f: &Tensor4) -> Tensor4 {
    let n = f.dim().0;
    let mut grad = Tensor4::zeros(f.raw_dim());
    for i in 0..n {
        let plane = f.slice(s![i, .., .., ..]);
        let m = plane.len() as f64;
        let mean = plane.sum() / m;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let std = var.sqrt();
        if std == 0.0 {
            continue;
        }
        let mut g = grad.slice_mut(s![i, .., .., ..]);
        ndarray::Zip::from(&mut g).and(&plane).for_each(|o, &v| {
            *o = (v - mean) / (m * std) / n as f64;
        });
    }
    grad
}

/// Iterative maximization of the mean per-sample Euclidean distance between
/// adversarial and clean tap features.
///
/// The distance gradient vanishes exactly at the clean point, so the default
/// configuration starts from a uniform draw inside the ball.
pub fn ssp_attack(
    model: &Classifier,
    tap: &LayerTap,
    x: &Tensor4,
    cfg: &IterConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor4> {
    cfg.validate()?;
    let eps = cfg.budget.epsilon;
    let alpha = cfg.step();
    let f_clean = model.extract_features(tap, x)?;
    let mut x_adv = if cfg.random_start { uniform_ball_start(x, eps, rng)? } else { x.clone() };
    for t in 0..cfg.iterations {
        let (f_adv, caches) = model.features_cached(tap, &x_adv)?;
        let grad_f = feature_distance_grad(&f_adv, &f_clean);
        let grad = model.grad_input_from_features(tap, &caches, &grad_f)?;
        check_finite(&grad, t)?;
        x_adv.zip_mut_with(&grad, |v, &g| *v += alpha * sign(g));
        x_adv = project(&x_adv, x, eps)?;
    }
    Ok(x_adv)
}

/// Batch-mean per-sample Euclidean feature distance.
pub fn feature_distance(f_adv: &Tensor4, f_clean: &Tensor4) -> f64 {
    let n = f_adv.dim().0;
    let mut total = 0.0;
    for i in 0..n {
        let d: f64 = f_adv
            .slice(s![i, .., .., ..])
            .iter()
            .zip(f_clean.slice(s![i, .., .., ..]).iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        total += d.sqrt();
    }
    total / n as f64
}

fn feature_distance_grad(f_adv: &Tensor4, f_clean: &Tensor4) -> Tensor4 {
    let n = f_adv.dim().0;
    let mut grad = Tensor4::zeros(f_adv.raw_dim());
    for i in 0..n {
        let diff: Vec<f64> = f_adv
            .slice(s![i, .., .., ..])
            .iter()
            .zip(f_clean.slice(s![i, .., .., ..]).iter())
            .map(|(&a, &b)| a - b)
            .collect();
        let dist = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        if dist == 0.0 {
            continue;
        }
        let mut g = grad.slice_mut(s![i, .., .., ..]);
        for (o, d) in g.iter_mut().zip(diff.iter()) {
            *o = d / (dist * n as f64);
        }
    }
    grad
}

/// Clipped Gaussian noise control at the given per-pixel standard deviation,
/// projected into the ball and pixel range.
pub fn gaussian_noise_with_std(
    x: &Tensor4,
    budget: &AttackBudget,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor4> {
    if noise_std == 0.0 || budget.epsilon == 0.0 {
        return project(x, x, budget.epsilon);
    }
    let normal = Normal::new(0.0, noise_std)
        .map_err(|e| Error::InvalidParameter(format!("noise distribution: {e}")))?;
    let mut noisy = x.clone();
    noisy.mapv_inplace(|v| v + normal.sample(rng));
    project(&noisy, x, budget.epsilon)
}

/// The noise control at its default strength, half the budget.
pub fn gaussian_noise_control(
    x: &Tensor4,
    budget: &AttackBudget,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor4> {
    gaussian_noise_with_std(x, budget, budget.epsilon / 2.0, rng)
}

/// 3x3 binomial kernel, the smoothing control applied to generator outputs
/// before projection.
pub const GAUSSIAN_KERNEL_3X3: [[f64; 3]; 3] = [
    [1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0],
    [2.0 / 16.0, 4.0 / 16.0, 2.0 / 16.0],
    [1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0],
];

/// Per-channel 3x3 Gaussian convolution with reflect padding.
pub fn gaussian_smooth(x: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = x.dim();
    let xp = pad::pad(x, 1, true);
    let mut y = Array4::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            for oi in 0..h {
                for oj in 0..w {
                    let mut acc = 0.0;
                    for (ki, row) in GAUSSIAN_KERNEL_3X3.iter().enumerate() {
                        for (kj, &kv) in row.iter().enumerate() {
                            acc += kv * xp[[i, ch, oi + ki, oj + kj]];
                        }
                    }
                    y[[i, ch, oi, oj]] = acc;
                }
            }
        }
    }
    y
}

fn resize_pad(x: &Tensor4, nh: usize, nw: usize, top: usize, left: usize) -> Tensor4 {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, c, h, w));
    for i in 0..n {
        let img = x.slice(s![i, .., .., ..]).to_owned();
        let resized = crate::data::bilinear_resize(&img, nh, nw);
        out.slice_mut(s![i, .., top..top + nh, left..left + nw]).assign(&resized);
    }
    out
}

/// Adjoint of [`resize_pad`]: crop the padded gradient and push it back
/// through the bilinear interpolation weights.
fn resize_pad_backward(
    grad: &Tensor4,
    h: usize,
    w: usize,
    nh: usize,
    nw: usize,
    top: usize,
    left: usize,
) -> Tensor4 {
    let (n, c, _, _) = grad.dim();
    let mut out = Array4::zeros((n, c, h, w));
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    for i in 0..n {
        for oi in 0..nh {
            let fy = ((oi as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for oj in 0..nw {
                let fx = ((oj as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                for ch in 0..c {
                    let g = grad[[i, ch, top + oi, left + oj]];
                    out[[i, ch, y0, x0]] += g * (1.0 - wy) * (1.0 - wx);
                    out[[i, ch, y0, x1]] += g * (1.0 - wy) * wx;
                    out[[i, ch, y1, x0]] += g * wy * (1.0 - wx);
                    out[[i, ch, y1, x1]] += g * wy * wx;
                }
            }
        }
    }
    out
}
