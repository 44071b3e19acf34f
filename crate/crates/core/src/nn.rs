//! Differentiable building blocks for the flow generator.
//!
//! Each op is a forward function plus a matching backward function; tensors are
//! single-sample `C × H × W` arrays in standard layout.

use indexmap::IndexMap;
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayView4, ArrayViewMut2, Axis, Dimension, Ix1, Ix2, Ix4};

use crate::error::{Error, Result};
use crate::resample::bilinear_taps;
use crate::scalar::Real;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;

/// Named parameter tensors in a fixed, deterministic order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    tensors: IndexMap<String, ArrayD<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
        }
    }

    /// `self[name] += delta`, creating nothing: the name must already exist.
    pub fn accumulate(&mut self, name: &str, delta: ArrayView<'_, T>) -> Result<()> {
        let t = self.get_mut(name)?;
        if t.shape() != delta.shape() {
            return Err(Error::shape("gradient accumulate", t.shape(), delta.shape()));
        }
        *t += &delta;
        Ok(())
    }

    /// `self += scale * other` over every tensor.
    pub fn add_scaled(&mut self, other: &ParamSet<T>, scale: T) {
        for (name, t) in self.tensors.iter_mut() {
            if let Some(o) = other.tensors.get(name) {
                t.zip_mut_with(o, |a, &b| *a += scale * b);
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| U::lit(x.as_f64()))))
                .collect(),
        }
    }

    pub fn vec(&self, name: &str) -> Result<ArrayView1<'_, T>> {
        self.get(name)?
            .view()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::Config(format!("`{name}` is not a vector")))
    }

    pub fn mat(&self, name: &str) -> Result<ArrayView2<'_, T>> {
        self.get(name)?
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::Config(format!("`{name}` is not a matrix")))
    }

    pub fn kernel(&self, name: &str) -> Result<ArrayView4<'_, T>> {
        self.get(name)?
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| Error::Config(format!("`{name}` is not a 4-D kernel")))
    }

    pub fn scalar(&self, name: &str) -> Result<T> {
        self.get(name)?
            .iter()
            .next()
            .copied()
            .ok_or_else(|| Error::Config(format!("`{name}` is empty")))
    }
}

/// Uniform fan-in initialization scaled for the leaky-ReLU gain.
pub fn uniform_init<T: Real, R: rand::Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<T> {
    let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_simple_fn(shape, || T::lit(rng.random_range(-bound..bound)))
}

pub type ArrayView<'a, T, D = ndarray::IxDyn> = ndarray::ArrayView<'a, T, D>;

fn out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Target size, in elements, of one im2col band; small enough to stay cache resident.
const BAND_ELEMS: usize = 1 << 16;

#[derive(Clone, Copy)]
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize) -> Self {
        let pad = k / 2;
        ConvGeometry {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho: out_len(h, k, stride, pad),
            wo: out_len(w, k, stride, pad),
        }
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn band_rows(&self) -> usize {
        (BAND_ELEMS / (self.patch() * self.wo).max(1)).clamp(1, self.ho)
    }

    fn bands(&self) -> impl Iterator<Item = (usize, usize)> {
        let rows = self.band_rows();
        let ho = self.ho;
        (0..ho).step_by(rows).map(move |y0| (y0, (y0 + rows).min(ho)))
    }

    /// Input column feeding output column `ox` through kernel tap `kx`.
    fn input_x(&self, ox: usize, kx: usize) -> Option<usize> {
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        (ix >= 0 && ix < self.w as isize).then_some(ix as usize)
    }

    fn input_y(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && iy < self.h as isize).then_some(iy as usize)
    }
}

/// Patch matrix for output rows `[oy0, oy1)`, written into `cols` (`patch × rows·wo`).
fn im2col_band<T: Real>(xs: &[T], g: &ConvGeometry, oy0: usize, oy1: usize, cols: &mut [T]) {
    let n = (oy1 - oy0) * g.wo;
    cols.fill(T::zero());
    let k = g.k;
    for c in 0..g.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in oy0..oy1 {
                    let Some(iy) = g.input_y(oy, ky) else { continue };
                    let src = &xs[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w];
                    let drow = &mut dst[(oy - oy0) * g.wo..(oy - oy0 + 1) * g.wo];
                    if g.stride == 1 {
                        let lo = g.pad.saturating_sub(kx);
                        let hi = g.wo.min(g.w + g.pad - kx);
                        if lo < hi {
                            drow[lo..hi].copy_from_slice(&src[lo + kx - g.pad..hi + kx - g.pad]);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            if let Some(ix) = g.input_x(ox, kx) {
                                *d = src[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_band`]: scatters `cols` back onto the input gradient `xs`.
fn col2im_band<T: Real>(cols: &[T], g: &ConvGeometry, oy0: usize, oy1: usize, xs: &mut [T]) {
    let n = (oy1 - oy0) * g.wo;
    let k = g.k;
    for c in 0..g.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in oy0..oy1 {
                    let Some(iy) = g.input_y(oy, ky) else { continue };
                    let dst = &mut xs[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w];
                    let srow = &src[(oy - oy0) * g.wo..(oy - oy0 + 1) * g.wo];
                    if g.stride == 1 {
                        let lo = g.pad.saturating_sub(kx);
                        let hi = g.wo.min(g.w + g.pad - kx);
                        for ox in lo..hi {
                            dst[ox + kx - g.pad] += srow[ox];
                        }
                    } else {
                        for (ox, &v) in srow.iter().enumerate() {
                            if let Some(ix) = g.input_x(ox, kx) {
                                dst[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn kernel_matrix<T: Real>(w: ArrayView4<T>) -> ArrayView2<T> {
    let (cout, cin, kh, kw) = w.dim();
    w.into_shape_with_order((cout, cin * kh * kw))
        .expect("kernel in standard layout")
}

/// Same-padded 2-D convolution (cross-correlation) with square kernel `w: Cout × Cin × k × k`.
pub fn conv2d<T: Real>(x: ArrayView3<T>, w: ArrayView4<T>, bias: Option<ArrayView1<T>>, stride: usize) -> Array3<T> {
    let (cout, cin, k, _) = w.dim();
    assert_eq!(cin, x.dim().0, "conv input channels");
    let g = ConvGeometry::new(cin, x.dim().1, x.dim().2, k, stride);
    let wm = kernel_matrix(w);
    let x = x.as_standard_layout();
    let mut out = if k == 1 && stride == 1 {
        let xm = x.view().into_shape_with_order((cin, g.h * g.w)).expect("standard layout");
        wm.dot(&xm)
    } else {
        let xs = x.as_slice().expect("standard layout");
        let mut out = Array2::zeros((cout, g.ho * g.wo));
        let mut buf = vec![T::zero(); g.patch() * g.band_rows() * g.wo];
        for (y0, y1) in g.bands() {
            let n = (y1 - y0) * g.wo;
            let cols = &mut buf[..g.patch() * n];
            im2col_band(xs, &g, y0, y1, cols);
            let cv = ArrayView2::from_shape((g.patch(), n), cols).expect("band shape");
            let mut dst = out.slice_mut(s![.., y0 * g.wo..y1 * g.wo]);
            general_mat_mul(T::one(), &wm, &cv, T::zero(), &mut dst);
        }
        out
    };
    if let Some(b) = bias {
        for (mut row, &bv) in out.outer_iter_mut().zip(b.iter()) {
            row.mapv_inplace(|v| v + bv);
        }
    }
    out.into_shape_with_order((cout, g.ho, g.wo)).expect("contiguous")
}

pub struct ConvGrads<T> {
    pub input: Array3<T>,
    pub weight: Array4<T>,
    pub bias: Array1<T>,
}

fn conv_grads<T: Real>(
    x: ArrayView3<T>,
    w: ArrayView4<T>,
    stride: usize,
    dy: ArrayView3<T>,
    need_input: bool,
) -> (Option<Array3<T>>, Array4<T>, Array1<T>) {
    let (cout, cin, k, _) = w.dim();
    let g = ConvGeometry::new(cin, x.dim().1, x.dim().2, k, stride);
    let dy = dy.as_standard_layout();
    let dym = dy.view().into_shape_with_order((cout, g.ho * g.wo)).expect("standard layout");
    let wm = kernel_matrix(w);
    let bias = dym.sum_axis(Axis(1));
    let x = x.as_standard_layout();
    if k == 1 && stride == 1 {
        let xm = x.view().into_shape_with_order((cin, g.h * g.w)).expect("standard layout");
        let dw = dym.dot(&xm.t());
        let dx = need_input.then(|| {
            wm.t()
                .dot(&dym)
                .into_shape_with_order((cin, g.h, g.w))
                .expect("contiguous")
        });
        return (dx, dw.into_shape_with_order((cout, cin, k, k)).expect("contiguous"), bias);
    }
    let xs = x.as_slice().expect("standard layout");
    let mut dw = Array2::zeros((cout, g.patch()));
    let mut dx = need_input.then(|| Array3::<T>::zeros((cin, g.h, g.w)));
    let cap = g.patch() * g.band_rows() * g.wo;
    let mut buf = vec![T::zero(); cap];
    let mut dbuf = vec![T::zero(); if need_input { cap } else { 0 }];
    for (y0, y1) in g.bands() {
        let n = (y1 - y0) * g.wo;
        let cols = &mut buf[..g.patch() * n];
        im2col_band(xs, &g, y0, y1, cols);
        let cv = ArrayView2::from_shape((g.patch(), n), &*cols).expect("band shape");
        let dyb = dym.slice(s![.., y0 * g.wo..y1 * g.wo]);
        general_mat_mul(T::one(), &dyb, &cv.t(), T::one(), &mut dw);
        if let Some(dx) = dx.as_mut() {
            let dcols = &mut dbuf[..g.patch() * n];
            let mut dv = ArrayViewMut2::from_shape((g.patch(), n), &mut *dcols).expect("band shape");
            general_mat_mul(T::one(), &wm.t(), &dyb, T::zero(), &mut dv);
            col2im_band(dcols, &g, y0, y1, dx.as_slice_mut().expect("fresh array"));
        }
    }
    (dx, dw.into_shape_with_order((cout, cin, k, k)).expect("contiguous"), bias)
}

pub fn conv2d_backward<T: Real>(x: ArrayView3<T>, w: ArrayView4<T>, stride: usize, dy: ArrayView3<T>) -> ConvGrads<T> {
    let (input, weight, bias) = conv_grads(x, w, stride, dy, true);
    ConvGrads {
        input: input.expect("requested"),
        weight,
        bias,
    }
}

/// Weight and bias gradients only, for layers whose input needs no gradient.
pub fn conv2d_weight_grad<T: Real>(x: ArrayView3<T>, w: ArrayView4<T>, stride: usize, dy: ArrayView3<T>) -> (Array4<T>, Array1<T>) {
    let (_, weight, bias) = conv_grads(x, w, stride, dy, false);
    (weight, bias)
}

/// Saved state of an instance normalization.
pub struct NormCache<T> {
    pub normalized: Array3<T>,
    pub inv_std: Array1<T>,
}

/// Per-channel normalization over the spatial plane, followed by an affine map.
pub fn instance_norm<T: Real>(x: ArrayView3<T>, gamma: ArrayView1<T>, beta: ArrayView1<T>) -> (Array3<T>, NormCache<T>) {
    let (c, h, w) = x.dim();
    let n = T::of_usize(h * w);
    let eps = T::lit(NORM_EPS);
    let mut normalized = Array3::zeros((c, h, w));
    let mut out = Array3::zeros((c, h, w));
    let mut inv_std = Array1::zeros(c);
    for ch in 0..c {
        let plane = x.index_axis(Axis(0), ch);
        let mean = plane.sum() / n;
        let var = plane.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std[ch] = is;
        let (g, b) = (gamma[ch], beta[ch]);
        let mut nrm = normalized.index_axis_mut(Axis(0), ch);
        let mut o = out.index_axis_mut(Axis(0), ch);
        ndarray::Zip::from(&mut nrm).and(&mut o).and(&plane).for_each(|nv, ov, &v| {
            let z = (v - mean) * is;
            *nv = z;
            *ov = g * z + b;
        });
    }
    (out, NormCache { normalized, inv_std })
}

pub fn instance_norm_backward<T: Real>(
    cache: &NormCache<T>,
    gamma: ArrayView1<T>,
    dy: ArrayView3<T>,
) -> (Array3<T>, Array1<T>, Array1<T>) {
    let (c, h, w) = dy.dim();
    let n = T::of_usize(h * w);
    let mut dx = Array3::zeros((c, h, w));
    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    for ch in 0..c {
        let z = cache.normalized.index_axis(Axis(0), ch);
        let g = dy.index_axis(Axis(0), ch);
        let mut sum_g = T::zero();
        let mut sum_gz = T::zero();
        ndarray::Zip::from(&g).and(&z).for_each(|&gv, &zv| {
            sum_g += gv;
            sum_gz += gv * zv;
        });
        dgamma[ch] = sum_gz;
        dbeta[ch] = sum_g;
        // dL/dz = gamma * dy
        let scale = gamma[ch] * cache.inv_std[ch] / n;
        let mut d = dx.index_axis_mut(Axis(0), ch);
        ndarray::Zip::from(&mut d).and(&g).and(&z).for_each(|dv, &gv, &zv| {
            *dv = scale * (n * gv - sum_g - zv * sum_gz);
        });
    }
    (dx, dgamma, dbeta)
}

pub fn leaky_relu<T: Real>(x: ArrayView3<T>) -> Array3<T> {
    let slope = T::lit(LEAKY_SLOPE);
    x.mapv(|v| if v > T::zero() { v } else { v * slope })
}

pub fn leaky_relu_backward<T: Real>(pre: ArrayView3<T>, dy: ArrayView3<T>) -> Array3<T> {
    let slope = T::lit(LEAKY_SLOPE);
    let mut out = dy.to_owned();
    ndarray::Zip::from(&mut out).and(&pre).for_each(|d, &p| {
        if p <= T::zero() {
            *d = *d * slope;
        }
    });
    out
}

/// Bilinear resize of every channel (half-pixel centers, clamped borders).
pub fn resize_bilinear<T: Real>(x: ArrayView3<T>, height: usize, width: usize) -> Array3<T> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, height, width));
    for ch in 0..c {
        let plane = crate::resample::bilinear_resize(x.index_axis(Axis(0), ch), height, width);
        out.index_axis_mut(Axis(0), ch).assign(&plane);
    }
    debug_assert!(h > 0 && w > 0);
    out
}

pub fn resize_bilinear_backward<T: Real>(dy: ArrayView3<T>, height: usize, width: usize) -> Array3<T> {
    let (c, oh, ow) = dy.dim();
    let xt = bilinear_taps::<T>(width, ow);
    let yt = bilinear_taps::<T>(height, oh);
    let mut out = Array3::zeros((c, height, width));
    let mut rows = Array2::<T>::zeros((height, ow));
    for ch in 0..c {
        rows.fill(T::zero());
        let g = dy.index_axis(Axis(0), ch);
        for (y, t) in yt.iter().enumerate() {
            for x in 0..ow {
                let v = g[[y, x]];
                rows[[t.lo, x]] += v * (T::one() - t.frac);
                rows[[t.hi, x]] += v * t.frac;
            }
        }
        let mut o = out.index_axis_mut(Axis(0), ch);
        for y in 0..height {
            for (x, t) in xt.iter().enumerate() {
                let v = rows[[y, x]];
                o[[y, t.lo]] += v * (T::one() - t.frac);
                o[[y, t.hi]] += v * t.frac;
            }
        }
    }
    out
}

pub fn concat_channels<T: Real>(a: ArrayView3<T>, b: ArrayView3<T>) -> Array3<T> {
    ndarray::concatenate(Axis(0), &[a, b]).expect("matching spatial size")
}

pub fn split_channels<T: Real>(x: ArrayView3<T>, first: usize) -> (Array3<T>, Array3<T>) {
    (x.slice(s![..first, .., ..]).to_owned(), x.slice(s![first.., .., ..]).to_owned())
}

/// Checks an array for NaN/inf, naming the first offending index.
pub fn ensure_finite<T: Real, D: Dimension>(what: &str, a: ArrayView<'_, T, D>) -> Result<()> {
    match a.indexed_iter().find(|(_, v)| !v.is_finite()) {
        None => Ok(()),
        Some((idx, _)) => Err(Error::Numeric {
            what: what.into(),
            location: format!("{idx:?}"),
        }),
    }
}
