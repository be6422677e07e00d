//! Spatial pooling and nearest-neighbor upsampling.

use ndarray::{Array2, Array4};

#[derive(Debug)]
pub struct MaxPoolCache {
    /// Flat index (0..4) of the argmax inside each 2x2 window, first hit wins.
    argmax: Array4<u8>,
}

/// 2x2 max pooling with stride 2. Requires even spatial dims.
pub fn maxpool2(x: &Array4<f64>) -> (Array4<f64>, MaxPoolCache) {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even spatial dims");
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Array4::zeros((n, c, ho, wo));
    let mut argmax = Array4::zeros((n, c, ho, wo));
    let xs = x.as_slice().expect("contiguous");
    let ys = y.as_slice_mut().expect("contiguous");
    let am = argmax.as_slice_mut().expect("contiguous");
    for plane_idx in 0..n * c {
        let src = &xs[plane_idx * h * w..(plane_idx + 1) * h * w];
        let dst = &mut ys[plane_idx * ho * wo..(plane_idx + 1) * ho * wo];
        let arg = &mut am[plane_idx * ho * wo..(plane_idx + 1) * ho * wo];
        for oi in 0..ho {
            let r0 = &src[(2 * oi) * w..(2 * oi + 1) * w];
            let r1 = &src[(2 * oi + 1) * w..(2 * oi + 2) * w];
            for oj in 0..wo {
                let candidates = [r0[2 * oj], r0[2 * oj + 1], r1[2 * oj], r1[2 * oj + 1]];
                let mut best = candidates[0];
                let mut best_k = 0u8;
                for (k, &v) in candidates.iter().enumerate().skip(1) {
                    if v > best {
                        best = v;
                        best_k = k as u8;
                    }
                }
                dst[oi * wo + oj] = best;
                arg[oi * wo + oj] = best_k;
            }
        }
    }
    (y, MaxPoolCache { argmax })
}

pub fn maxpool2_backward(cache: &MaxPoolCache, grad_out: &Array4<f64>) -> Array4<f64> {
    let (n, c, ho, wo) = grad_out.dim();
    let (h, w) = (ho * 2, wo * 2);
    let mut dx = Array4::zeros((n, c, h, w));
    let gs = grad_out.as_slice().expect("contiguous");
    let am = cache.argmax.as_slice().expect("contiguous");
    let ds = dx.as_slice_mut().expect("contiguous");
    for plane_idx in 0..n * c {
        let g = &gs[plane_idx * ho * wo..(plane_idx + 1) * ho * wo];
        let a = &am[plane_idx * ho * wo..(plane_idx + 1) * ho * wo];
        let d = &mut ds[plane_idx * h * w..(plane_idx + 1) * h * w];
        for oi in 0..ho {
            for oj in 0..wo {
                let k = a[oi * wo + oj];
                let (di, dj) = ((k / 2) as usize, (k % 2) as usize);
                d[(2 * oi + di) * w + 2 * oj + dj] += g[oi * wo + oj];
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::zeros((n, c, h * 2, w * 2));
    let xs = x.as_slice().expect("contiguous");
    let ys = y.as_slice_mut().expect("contiguous");
    let (h2, w2) = (h * 2, w * 2);
    for plane_idx in 0..n * c {
        let src = &xs[plane_idx * h * w..(plane_idx + 1) * h * w];
        let dst = &mut ys[plane_idx * h2 * w2..(plane_idx + 1) * h2 * w2];
        for i in 0..h {
            let row = &src[i * w..(i + 1) * w];
            let (top, bottom) = dst[2 * i * w2..(2 * i + 2) * w2].split_at_mut(w2);
            for (j, &v) in row.iter().enumerate() {
                top[2 * j] = v;
                top[2 * j + 1] = v;
            }
            bottom.copy_from_slice(top);
        }
    }
    y
}

pub fn upsample2_backward(grad_out: &Array4<f64>) -> Array4<f64> {
    let (n, c, h2, w2) = grad_out.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::zeros((n, c, h, w));
    let gs = grad_out.as_slice().expect("contiguous");
    let ds = dx.as_slice_mut().expect("contiguous");
    for plane_idx in 0..n * c {
        let g = &gs[plane_idx * h2 * w2..(plane_idx + 1) * h2 * w2];
        let d = &mut ds[plane_idx * h * w..(plane_idx + 1) * h * w];
        for i in 0..h {
            let top = &g[2 * i * w2..(2 * i + 1) * w2];
            let bottom = &g[(2 * i + 1) * w2..(2 * i + 2) * w2];
            for j in 0..w {
                d[i * w + j] = top[2 * j] + top[2 * j + 1] + bottom[2 * j] + bottom[2 * j + 1];
            }
        }
    }
    dx
}

/// Mean over the spatial axes, keeping a (N, C, 1, 1) layout.
pub fn global_avg_pool(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let m = (h * w) as f64;
    let mut y = Array4::zeros((n, c, 1, 1));
    for i in 0..n {
        for ch in 0..c {
            y[[i, ch, 0, 0]] = x.slice(ndarray::s![i, ch, .., ..]).sum() / m;
        }
    }
    y
}

pub fn global_avg_pool_backward(grad_out: &Array4<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c, _, _) = grad_out.dim();
    let m = (h * w) as f64;
    let mut dx = Array4::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            let g = grad_out[[i, ch, 0, 0]] / m;
            dx.slice_mut(ndarray::s![i, ch, .., ..]).fill(g);
        }
    }
    dx
}

/// Flatten (N, C, 1, 1) logits into a (N, C) matrix.
pub fn squeeze_logits(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    assert!(h == 1 && w == 1, "logits must be spatially pooled");
    x.view()
        .into_shape_with_order((n, c))
        .expect("contiguous")
        .to_owned()
}

/// Lift a (N, K) gradient back to the (N, K, 1, 1) layout.
pub fn unsqueeze_grad(g: &Array2<f64>) -> Array4<f64> {
    let (n, k) = g.dim();
    g.view()
        .into_shape_with_order((n, k, 1, 1))
        .expect("contiguous")
        .to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_picks_first_max_on_ties() {
        let x = Array4::from_elem((1, 1, 2, 2), 1.0);
        let (y, cache) = maxpool2(&x);
        assert_eq!(y[[0, 0, 0, 0]], 1.0);
        assert_eq!(cache.argmax[[0, 0, 0, 0]], 0);
    }

    #[test]
    fn maxpool_matches_naive() {
        let x = Array4::from_shape_fn((2, 3, 6, 4), |(a, b, i, j)| {
            (((a * 31 + b * 17 + i * 5 + j * 3) % 23) as f64).sin()
        });
        let (y, _) = maxpool2(&x);
        for a in 0..2 {
            for b in 0..3 {
                for oi in 0..3 {
                    for oj in 0..2 {
                        let want = [
                            x[[a, b, 2 * oi, 2 * oj]],
                            x[[a, b, 2 * oi, 2 * oj + 1]],
                            x[[a, b, 2 * oi + 1, 2 * oj]],
                            x[[a, b, 2 * oi + 1, 2 * oj + 1]],
                        ]
                        .into_iter()
                        .fold(f64::NEG_INFINITY, f64::max);
                        assert_eq!(y[[a, b, oi, oj]], want);
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_round_trip_sums_gradient() {
        let x = Array4::from_shape_fn((1, 1, 2, 2), |(_, _, i, j)| (i * 2 + j) as f64);
        let y = upsample2(&x);
        assert_eq!(y[[0, 0, 3, 3]], 3.0);
        let dx = upsample2_backward(&Array4::ones((1, 1, 4, 4)));
        assert_eq!(dx[[0, 0, 0, 0]], 4.0);
    }
}
