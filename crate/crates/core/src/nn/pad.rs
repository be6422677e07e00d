//! Spatial padding helpers shared by convolution, smoothing and the
//! any-resolution inference path.

use ndarray::Array4;

/// Mirror an out-of-range coordinate back into `0..dim` without repeating the
/// edge sample. Requires the overhang to be at most `dim - 1`.
#[inline]
pub fn reflect_index(i: isize, dim: usize) -> usize {
    let d = dim as isize;
    let j = if i < 0 {
        -i
    } else if i >= d {
        2 * d - 2 - i
    } else {
        i
    };
    debug_assert!((0..d).contains(&j), "reflect overhang exceeds dimension");
    j as usize
}

/// Pad with independent extents per side.
pub fn pad_hw(
    x: &Array4<f64>,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
    reflect: bool,
) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (hp, wp) = (h + top + bottom, w + left + right);
    let mut out = Array4::zeros((n, c, hp, wp));
    let x_std;
    let src_all = match x.as_slice() {
        Some(s) => s,
        None => {
            x_std = x.as_standard_layout().into_owned();
            x_std.as_slice().expect("standard layout")
        }
    };
    let dst_all = out.as_slice_mut().expect("contiguous");
    for plane_idx in 0..n * c {
        let src = &src_all[plane_idx * h * w..(plane_idx + 1) * h * w];
        let dst = &mut dst_all[plane_idx * hp * wp..(plane_idx + 1) * hp * wp];
        for oi in 0..hp {
            let si = oi as isize - top as isize;
            let si = if reflect {
                reflect_index(si, h)
            } else if si < 0 || si >= h as isize {
                continue;
            } else {
                si as usize
            };
            let src_row = &src[si * w..(si + 1) * w];
            let dst_row = &mut dst[oi * wp..(oi + 1) * wp];
            // interior span is a straight copy
            dst_row[left..left + w].copy_from_slice(src_row);
            if reflect {
                for oj in 0..left {
                    dst_row[oj] = src_row[reflect_index(oj as isize - left as isize, w)];
                }
                for oj in left + w..wp {
                    dst_row[oj] = src_row[reflect_index(oj as isize - left as isize, w)];
                }
            }
        }
    }
    out
}

/// Symmetric padding on both spatial axes.
pub fn pad(x: &Array4<f64>, p: usize, reflect: bool) -> Array4<f64> {
    if p == 0 {
        return x.clone();
    }
    pad_hw(x, p, p, p, p, reflect)
}

/// Backward of [`pad`]: fold the padded gradient back onto the source pixels.
pub fn pad_backward(grad_padded: &Array4<f64>, p: usize, reflect: bool) -> Array4<f64> {
    let (n, c, hp, wp) = grad_padded.dim();
    if p == 0 {
        return grad_padded.clone();
    }
    let (h, w) = (hp - 2 * p, wp - 2 * p);
    let mut out = Array4::zeros((n, c, h, w));
    let src_all = grad_padded.as_slice().expect("contiguous");
    let dst_all = out.as_slice_mut().expect("contiguous");
    for plane_idx in 0..n * c {
        let src = &src_all[plane_idx * hp * wp..(plane_idx + 1) * hp * wp];
        let dst = &mut dst_all[plane_idx * h * w..(plane_idx + 1) * h * w];
        for oi in 0..hp {
            let si = oi as isize - p as isize;
            let si = if reflect {
                reflect_index(si, h)
            } else if si < 0 || si >= h as isize {
                continue;
            } else {
                si as usize
            };
            let src_row = &src[oi * wp..(oi + 1) * wp];
            let dst_row = &mut dst[si * w..(si + 1) * w];
            for (d, s) in dst_row.iter_mut().zip(src_row[p..p + w].iter()) {
                *d += s;
            }
            if reflect {
                for oj in 0..p {
                    dst_row[reflect_index(oj as isize - p as isize, w)] += src_row[oj];
                }
                for oj in p + w..wp {
                    dst_row[reflect_index(oj as isize - p as isize, w)] += src_row[oj];
                }
            }
        }
    }
    out
}

/// Center-crop back to `(h, w)` after a `pad_hw` round trip.
pub fn center_crop(x: &Array4<f64>, h: usize, w: usize) -> Array4<f64> {
    let (_, _, hp, wp) = x.dim();
    assert!(hp >= h && wp >= w, "crop larger than input");
    let top = (hp - h) / 2;
    let left = (wp - w) / 2;
    x.slice(ndarray::s![.., .., top..top + h, left..left + w]).to_owned()
}
