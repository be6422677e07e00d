//! 2-D convolution via im2col and dense matrix products.
//!
//! Padding is folded into the unfold/fold kernels, so no padded copy of the
//! input is ever materialized. Samples are grouped into a fixed number of
//! chunks, each becoming one column matrix and one matrix product; chunk
//! boundaries depend only on the batch size and parameter-gradient reduction
//! runs in chunk order, so results are bit-reproducible.

use super::pad::reflect_index;
use super::GradStore;
use ndarray::{s, Array1, Array2, Array4, ArrayViewD, ArrayViewMutD};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Upper bound on sample chunks per convolution call.
const MAX_CHUNKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// (out_channels, in_channels, kh, kw)
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
    pub(crate) slot_w: usize,
    pub(crate) slot_b: usize,
}

#[derive(Debug)]
pub struct ConvCache {
    /// Input batch, kept so the backward pass can rebuild the column matrix.
    x: Array4<f64>,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, pad_mode: PadMode) -> Self {
        Conv2d {
            weight: Array4::zeros((cout, cin, k, k)),
            bias: Array1::zeros(cout),
            stride,
            pad,
            pad_mode,
            slot_w: usize::MAX,
            slot_b: usize::MAX,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub(crate) fn assign_slots(&mut self, next: &mut usize) {
        self.slot_w = *next;
        self.slot_b = *next + 1;
        *next += 2;
    }

    pub(crate) fn init_params(&mut self, rng: &mut ChaCha8Rng) {
        let (_, cin, kh, kw) = self.weight.dim();
        let fan_in = (cin * kh * kw) as f64;
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

    fn geometry(&self, h: usize, w: usize) -> ColDims {
        let (_, cin, kh, kw) = self.weight.dim();
        let hp = h + 2 * self.pad;
        let wp = w + 2 * self.pad;
        ColDims {
            cin,
            h,
            w,
            kh,
            kw,
            stride: self.stride,
            pad: self.pad,
            reflect: self.pad_mode == PadMode::Reflect,
            ho: (hp - kh) / self.stride + 1,
            wo: (wp - kw) / self.stride + 1,
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        self.run_forward(x)
    }

    pub fn forward_cached(&self, x: &Array4<f64>) -> (Array4<f64>, ConvCache) {
        let y = self.run_forward(x);
        (y, ConvCache { x: x.clone() })
    }

    fn run_forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, cin, h, w) = x.dim();
        let (cout, wcin, kh, kw) = self.weight.dim();
        assert_eq!(cin, wcin, "conv input channel mismatch");
        let d = self.geometry(h, w);
        let (ho, wo) = (d.ho, d.wo);
        let k = cin * kh * kw;
        let plane = ho * wo;
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((cout, k))
            .expect("weight is contiguous");
        let x_std;
        let x_flat = match x.as_slice() {
            Some(sl) => sl,
            None => {
                x_std = x.as_standard_layout().into_owned();
                x_std.as_slice().expect("standard layout")
            }
        };
        let sample_len = cin * h * w;

        let chunks = sample_chunks(n);
        let outputs: Vec<(usize, Array2<f64>)> = chunks
            .par_iter()
            .map(|&(start, len)| {
                let mut col = Array2::zeros((k, len * plane));
                {
                    let col_flat = col.as_slice_mut().expect("contiguous");
                    for li in 0..len {
                        im2col(
                            &x_flat[(start + li) * sample_len..(start + li + 1) * sample_len],
                            col_flat,
                            len * plane,
                            li * plane,
                            d,
                        );
                    }
                }
                (start, w2.dot(&col))
            })
            .collect();

        let mut y = Array4::zeros((n, cout, ho, wo));
        {
            let y_flat = y.as_slice_mut().expect("contiguous");
            for (start, m) in outputs {
                let len = m.dim().1 / plane;
                let src = m.as_slice().expect("gemm output contiguous");
                for c in 0..cout {
                    let b = self.bias[c];
                    for li in 0..len {
                        let dst_off = ((start + li) * cout + c) * plane;
                        let src_off = c * len * plane + li * plane;
                        for (o, v) in y_flat[dst_off..dst_off + plane]
                            .iter_mut()
                            .zip(src[src_off..src_off + plane].iter())
                        {
                            *o = v + b;
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(
        &self,
        cache: &ConvCache,
        grad_out: &Array4<f64>,
        grads: Option<&mut GradStore>,
    ) -> Array4<f64> {
        let (n, cout, ho, wo) = grad_out.dim();
        let (_, cin, kh, kw) = self.weight.dim();
        let (_, _, h, w) = cache.x.dim();
        let d = self.geometry(h, w);
        debug_assert_eq!((d.ho, d.wo), (ho, wo));
        let k = cin * kh * kw;
        let plane = ho * wo;
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((cout, k))
            .expect("weight is contiguous");
        let want_param_grads = grads.is_some();
        let x_flat = cache.x.as_slice().expect("contiguous");
        let g_flat = grad_out.as_slice().expect("contiguous");
        let sample_len = cin * h * w;

        let chunks = sample_chunks(n);
        // (start, dx chunk, optional dW chunk), reduced in chunk order below
        let parts: Vec<(usize, Vec<f64>, Option<Array2<f64>>)> = chunks
            .par_iter()
            .map(|&(start, len)| {
                let mut col = Array2::zeros((k, len * plane));
                {
                    let col_flat = col.as_slice_mut().expect("contiguous");
                    for li in 0..len {
                        im2col(
                            &x_flat[(start + li) * sample_len..(start + li + 1) * sample_len],
                            col_flat,
                            len * plane,
                            li * plane,
                            d,
                        );
                    }
                }
                // gather the chunk's output gradient as (cout, len*plane)
                let mut g_chunk = Array2::zeros((cout, len * plane));
                {
                    let gc = g_chunk.as_slice_mut().expect("contiguous");
                    for li in 0..len {
                        for c in 0..cout {
                            let src_off = ((start + li) * cout + c) * plane;
                            let dst_off = c * len * plane + li * plane;
                            gc[dst_off..dst_off + plane]
                                .copy_from_slice(&g_flat[src_off..src_off + plane]);
                        }
                    }
                }
                let dw = want_param_grads.then(|| g_chunk.dot(&col.t()));
                let dcol = w2.t().dot(&g_chunk);
                let dcol_flat = dcol.as_slice().expect("contiguous");
                let mut dx_chunk = vec![0.0; len * sample_len];
                for li in 0..len {
                    col2im(
                        dcol_flat,
                        &mut dx_chunk[li * sample_len..(li + 1) * sample_len],
                        len * plane,
                        li * plane,
                        d,
                    );
                }
                (start, dx_chunk, dw)
            })
            .collect();

        let mut dx = Array4::zeros((n, cin, h, w));
        {
            let dx_flat = dx.as_slice_mut().expect("contiguous");
            let mut dw_total: Option<Array2<f64>> =
                want_param_grads.then(|| Array2::zeros((cout, k)));
            for (start, dx_chunk, dw_chunk) in parts {
                dx_flat[start * sample_len..start * sample_len + dx_chunk.len()]
                    .copy_from_slice(&dx_chunk);
                if let (Some(total), Some(part)) = (dw_total.as_mut(), dw_chunk) {
                    *total += &part;
                }
            }
            if let Some(store) = grads {
                let dw4 = dw_total
                    .expect("dw accumulated")
                    .into_shape_with_order((cout, cin, kh, kw))
                    .expect("contiguous");
                *store.slot_mut(self.slot_w) += &dw4.into_dyn();
                let mut db = Array1::zeros(cout);
                for c in 0..cout {
                    db[c] = grad_out.slice(s![.., c, .., ..]).sum();
                }
                *store.slot_mut(self.slot_b) += &db.into_dyn();
            }
        }
        dx
    }
}

/// Fixed partition of `n` samples into at most [`MAX_CHUNKS`] spans.
fn sample_chunks(n: usize) -> Vec<(usize, usize)> {
    let chunk_count = n.min(MAX_CHUNKS).max(1);
    let base = n / chunk_count;
    let extra = n % chunk_count;
    let mut out = Vec::with_capacity(chunk_count);
    let mut start = 0;
    for i in 0..chunk_count {
        let len = base + usize::from(i < extra);
        if len > 0 {
            out.push((start, len));
        }
        start += len;
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct ColDims {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    reflect: bool,
    ho: usize,
    wo: usize,
}

impl ColDims {
    /// Source row for padded coordinate `i`, or None outside a zero pad.
    #[inline]
    fn src_index(&self, i: isize, dim: usize) -> Option<usize> {
        if (0..dim as isize).contains(&i) {
            Some(i as usize)
        } else if self.reflect {
            Some(reflect_index(i, dim))
        } else {
            None
        }
    }
}

/// Unfold one sample (flat CHW) into its column block of a row-major
/// (cin*kh*kw, row_stride) matrix starting at `col_off`, with padding applied
/// on the fly. The column buffer must be pre-zeroed.
fn im2col(x: &[f64], col: &mut [f64], row_stride: usize, col_off: usize, d: ColDims) {
    let p = d.pad as isize;
    for c in 0..d.cin {
        let base_c = c * d.h * d.w;
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((c * d.kh + ki) * d.kw + kj) * row_stride + col_off;
                for oi in 0..d.ho {
                    let si = (oi * d.stride + ki) as isize - p;
                    let Some(si) = d.src_index(si, d.h) else { continue };
                    let src_row = &x[base_c + si * d.w..base_c + (si + 1) * d.w];
                    let dst = row + oi * d.wo;
                    if d.stride == 1 {
                        // columns map to sj = oj + kj - pad: a contiguous span
                        // with possible overhang on both ends
                        let shift = kj as isize - p;
                        let lo = (-shift).clamp(0, d.wo as isize) as usize;
                        let hi = ((d.w as isize - shift).clamp(0, d.wo as isize)) as usize;
                        for oj in 0..lo {
                            if let Some(sj) = d.src_index(oj as isize + shift, d.w) {
                                col[dst + oj] = src_row[sj];
                            }
                        }
                        col[dst + lo..dst + hi].copy_from_slice(
                            &src_row[(lo as isize + shift) as usize..(hi as isize + shift) as usize],
                        );
                        for oj in hi..d.wo {
                            if let Some(sj) = d.src_index(oj as isize + shift, d.w) {
                                col[dst + oj] = src_row[sj];
                            }
                        }
                    } else {
                        for oj in 0..d.wo {
                            let sj = (oj * d.stride + kj) as isize - p;
                            if let Some(sj) = d.src_index(sj, d.w) {
                                col[dst + oj] = src_row[sj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Fold one sample's column block back onto its input gradient (adjoint of
/// [`im2col`]).
fn col2im(dcol: &[f64], dx: &mut [f64], row_stride: usize, col_off: usize, d: ColDims) {
    let p = d.pad as isize;
    for c in 0..d.cin {
        let base_c = c * d.h * d.w;
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((c * d.kh + ki) * d.kw + kj) * row_stride + col_off;
                for oi in 0..d.ho {
                    let si = (oi * d.stride + ki) as isize - p;
                    let Some(si) = d.src_index(si, d.h) else { continue };
                    let dst_row = &mut dx[base_c + si * d.w..base_c + (si + 1) * d.w];
                    let src = row + oi * d.wo;
                    if d.stride == 1 {
                        let shift = kj as isize - p;
                        let lo = (-shift).clamp(0, d.wo as isize) as usize;
                        let hi = ((d.w as isize - shift).clamp(0, d.wo as isize)) as usize;
                        for oj in 0..lo {
                            if let Some(sj) = d.src_index(oj as isize + shift, d.w) {
                                dst_row[sj] += dcol[src + oj];
                            }
                        }
                        for (o, v) in dst_row
                            [(lo as isize + shift) as usize..(hi as isize + shift) as usize]
                            .iter_mut()
                            .zip(dcol[src + lo..src + hi].iter())
                        {
                            *o += v;
                        }
                        for oj in hi..d.wo {
                            if let Some(sj) = d.src_index(oj as isize + shift, d.w) {
                                dst_row[sj] += dcol[src + oj];
                            }
                        }
                    } else {
                        for oj in 0..d.wo {
                            let sj = (oj * d.stride + kj) as isize - p;
                            if let Some(sj) = d.src_index(sj, d.w) {
                                dst_row[sj] += dcol[src + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::pad;
    use rand_chacha::rand_core::SeedableRng;

    fn direct_conv(
        x: &Array4<f64>,
        weight: &Array4<f64>,
        bias: &Array1<f64>,
        stride: usize,
        p: usize,
        reflect: bool,
    ) -> Array4<f64> {
        let (n, cin, h, w) = x.dim();
        let (cout, _, kh, kw) = weight.dim();
        let xp = pad::pad(x, p, reflect);
        let ho = (h + 2 * p - kh) / stride + 1;
        let wo = (w + 2 * p - kw) / stride + 1;
        let mut y = Array4::zeros((n, cout, ho, wo));
        for i in 0..n {
            for co in 0..cout {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    acc += weight[[co, ci, ki, kj]]
                                        * xp[[i, ci, oi * stride + ki, oj * stride + kj]];
                                }
                            }
                        }
                        y[[i, co, oi, oj]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn chunking_covers_every_batch_size() {
        for n in 1..=9 {
            let chunks = sample_chunks(n);
            let total: usize = chunks.iter().map(|(_, l)| l).sum();
            assert_eq!(total, n);
            let mut expect_start = 0;
            for (start, len) in chunks {
                assert_eq!(start, expect_start);
                assert!(len > 0);
                expect_start += len;
            }
        }
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (stride, p, mode) in [
            (1, 1, PadMode::Zero),
            (2, 1, PadMode::Reflect),
            (1, 0, PadMode::Zero),
            (1, 2, PadMode::Reflect),
            (2, 1, PadMode::Zero),
        ] {
            let mut conv = Conv2d::new(3, 4, 3, stride, p, mode);
            let mut next = 0;
            conv.assign_slots(&mut next);
            conv.init_params(&mut rng);
            for n in [1usize, 2, 5] {
                let x = Array4::from_shape_fn((n, 3, 8, 8), |(a, b, c, d)| {
                    ((a * 531 + b * 71 + c * 13 + d) % 17) as f64 / 17.0 - 0.3
                });
                let got = conv.forward(&x);
                let want =
                    direct_conv(&x, &conv.weight, &conv.bias, stride, p, mode == PadMode::Reflect);
                let diff = (&got - &want).iter().map(|v| v.abs()).fold(0.0, f64::max);
                assert!(diff < 1e-12, "stride {stride} pad {p} {mode:?}: max abs diff {diff}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (stride, p, mode) in [(2, 1, PadMode::Reflect), (1, 1, PadMode::Zero)] {
            let mut conv = Conv2d::new(2, 3, 3, stride, p, mode);
            let mut next = 0;
            conv.assign_slots(&mut next);
            conv.init_params(&mut rng);
            let x = Array4::from_shape_fn((3, 2, 6, 6), |(a, b, c, d)| {
                ((a * 13 + b * 7 + c * 3 + d) % 11) as f64 / 11.0 - 0.4
            });
            let loss =
                |c: &Conv2d, x: &Array4<f64>| c.forward(x).iter().map(|v| v * v).sum::<f64>() * 0.5;

            let (y, cache) = conv.forward_cached(&x);
            // slots 0/1 are weight/bias; dL/dy = y for L = 0.5*sum(y^2)
            let mut store = GradStore::zeros_like(&[
                conv.weight.view().into_dyn().raw_dim(),
                conv.bias.view().into_dyn().raw_dim(),
            ]);
            let dx = conv.backward(&cache, &y, Some(&mut store));

            let eps = 1e-6;
            // input gradient
            for probe in [(0usize, 0usize, 0usize, 0usize), (1, 1, 3, 2), (2, 0, 5, 5)] {
                let mut xp = x.clone();
                xp[[probe.0, probe.1, probe.2, probe.3]] += eps;
                let lp = loss(&conv, &xp);
                xp[[probe.0, probe.1, probe.2, probe.3]] -= 2.0 * eps;
                let lm = loss(&conv, &xp);
                let fd = (lp - lm) / (2.0 * eps);
                let an = dx[[probe.0, probe.1, probe.2, probe.3]];
                assert!((fd - an).abs() < 1e-6, "input grad: fd={fd} an={an}");
            }
            // weight gradient
            for probe in [(0usize, 0usize, 0usize, 0usize), (2, 1, 2, 2)] {
                let orig = conv.weight[[probe.0, probe.1, probe.2, probe.3]];
                conv.weight[[probe.0, probe.1, probe.2, probe.3]] = orig + eps;
                let lp = loss(&conv, &x);
                conv.weight[[probe.0, probe.1, probe.2, probe.3]] = orig - eps;
                let lm = loss(&conv, &x);
                conv.weight[[probe.0, probe.1, probe.2, probe.3]] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = store.slot(0)[[probe.0, probe.1, probe.2, probe.3]];
                assert!((fd - an).abs() < 1e-6, "weight grad: fd={fd} an={an}");
            }
        }
    }
}
