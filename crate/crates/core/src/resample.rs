//! Separable plane resampling: area averaging for reduction, bilinear for enlargement.
//!
//! Bilinear interpolation is always evaluated in lerp form `v0 + a * (v1 - v0)`,
//! so constant planes come out bit-exactly constant.

use ndarray::{Array2, ArrayView2};

use crate::scalar::Real;

/// One output sample of a 1-D bilinear resampling: `lerp(src[lo], src[hi], frac)`.
#[derive(Clone, Copy, Debug)]
pub struct LerpTap<T> {
    pub lo: usize,
    pub hi: usize,
    pub frac: T,
}

/// Half-pixel-centered bilinear taps, clamped at the borders.
pub fn bilinear_taps<T: Real>(src_len: usize, dst_len: usize) -> Vec<LerpTap<T>> {
    assert!(src_len > 0 && dst_len > 0);
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(src_len - 1);
            LerpTap {
                lo,
                hi,
                frac: T::lit(x - lo as f64),
            }
        })
        .collect()
}

/// Box-filter weights: output cell `i` averages the source interval `[i*s, (i+1)*s)`.
pub fn area_taps<T: Real>(src_len: usize, dst_len: usize) -> Vec<Vec<(usize, T)>> {
    assert!(src_len > 0 && dst_len > 0);
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|i| {
            let start = i as f64 * scale;
            let end = (i + 1) as f64 * scale;
            let first = start.floor() as usize;
            let last = (end.ceil() as usize).min(src_len);
            (first..last)
                .filter_map(|j| {
                    let overlap = (end.min((j + 1) as f64) - start.max(j as f64)).max(0.0);
                    (overlap > 0.0).then(|| (j, T::lit(overlap / scale)))
                })
                .collect()
        })
        .collect()
}

#[inline]
pub fn lerp<T: Real>(v0: T, v1: T, a: T) -> T {
    v0 + a * (v1 - v0)
}

pub fn bilinear_resize<T: Real>(src: ArrayView2<T>, height: usize, width: usize) -> Array2<T> {
    let (sh, sw) = src.dim();
    if (sh, sw) == (height, width) {
        return src.to_owned();
    }
    let xt = bilinear_taps::<T>(sw, width);
    let yt = bilinear_taps::<T>(sh, height);
    let mut rows = Array2::<T>::zeros((sh, width));
    for y in 0..sh {
        for (x, t) in xt.iter().enumerate() {
            rows[[y, x]] = lerp(src[[y, t.lo]], src[[y, t.hi]], t.frac);
        }
    }
    let mut out = Array2::<T>::zeros((height, width));
    for (y, t) in yt.iter().enumerate() {
        for x in 0..width {
            out[[y, x]] = lerp(rows[[t.lo, x]], rows[[t.hi, x]], t.frac);
        }
    }
    out
}

pub fn area_resize<T: Real>(src: ArrayView2<T>, height: usize, width: usize) -> Array2<T> {
    let (sh, sw) = src.dim();
    if (sh, sw) == (height, width) {
        return src.to_owned();
    }
    let xt = area_taps::<T>(sw, width);
    let yt = area_taps::<T>(sh, height);
    let mut rows = Array2::<T>::zeros((sh, width));
    for y in 0..sh {
        for (x, taps) in xt.iter().enumerate() {
            rows[[y, x]] = taps.iter().map(|&(j, w)| src[[y, j]] * w).sum();
        }
    }
    let mut out = Array2::<T>::zeros((height, width));
    for (y, taps) in yt.iter().enumerate() {
        for x in 0..width {
            out[[y, x]] = taps.iter().map(|&(j, w)| rows[[j, x]] * w).sum();
        }
    }
    out
}

/// Area averaging when shrinking, bilinear when enlarging (per axis).
pub fn resize_plane<T: Real>(src: ArrayView2<T>, height: usize, width: usize) -> Array2<T> {
    let (sh, sw) = src.dim();
    let tmp = if width < sw {
        area_resize(src, sh, width)
    } else {
        bilinear_resize(src, sh, width)
    };
    if height < sh {
        area_resize(tmp.view(), height, width)
    } else {
        bilinear_resize(tmp.view(), height, width)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn area_taps_sum_to_one() {
        for (s, d) in [(256, 16), (10, 3), (7, 7), (5, 2)] {
            for taps in area_taps::<f64>(s, d) {
                let total: f64 = taps.iter().map(|t| t.1).sum();
                assert!((total - 1.0).abs() < 1e-12, "{s}->{d}: {total}");
            }
        }
    }

    #[test]
    fn area_halving_averages_blocks() {
        let src = array![[1.0, 3.0], [5.0, 7.0]];
        let out = area_resize(src.view(), 1, 1);
        assert_eq!(out[[0, 0]], 4.0);
    }

    #[test]
    fn bilinear_keeps_constants_exact() {
        let src = Array2::from_elem((3, 7), 0.1f32);
        let out = bilinear_resize(src.view(), 11, 19);
        assert!(out.iter().all(|&v| v == 0.1f32));
    }

    #[test]
    fn bilinear_doubling_interpolates_quarter_weights() {
        let src = array![[0.0, 4.0]];
        let out = bilinear_resize(src.view(), 1, 4);
        assert_eq!(out.row(0).to_vec(), vec![0.0, 1.0, 3.0, 4.0]);
    }
}
