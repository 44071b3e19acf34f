//! Backward bilinear warping with a runtime multiplier, flow upsampling, and
//! flow visualization.

use ndarray::{Array3, Axis};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::imaging::Image;
use crate::resample::{bilinear_resize, lerp, resize_plane};
use crate::scalar::Real;

/// Strength/direction knob applied to a flow at warp time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiplierMu(f64);

impl MultiplierMu {
    pub const ONE: MultiplierMu = MultiplierMu(1.0);

    /// Accepts any finite value; values outside `[-1, 1]` are logged.
    pub fn lenient(value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::Invalid(format!("mu must be finite, got {value}")));
        }
        if value.abs() > 1.0 {
            log::warn!("mu = {value} is outside the demonstrated range [-1, 1]");
        }
        Ok(MultiplierMu(value))
    }

    /// Accepts only `[-1, 1]`.
    pub fn strict(value: f64) -> Result<Self> {
        if !value.is_finite() || value.abs() > 1.0 {
            return Err(Error::Invalid(format!("mu must lie in [-1, 1], got {value}")));
        }
        Ok(MultiplierMu(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

struct Tap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    a: T,
    b: T,
    /// Whether the sample coordinate moves with the flow along x / y (not pinned by clamping).
    free_x: bool,
    free_y: bool,
}

#[inline]
fn tap<T: Real>(x: usize, y: usize, fx: T, fy: T, mu: T, w: usize, h: usize) -> Tap<T> {
    let max_x = T::of_usize(w - 1);
    let max_y = T::of_usize(h - 1);
    let sx_raw = T::of_usize(x) + mu * fx;
    let sy_raw = T::of_usize(y) + mu * fy;
    let sx = sx_raw.max(T::zero()).min(max_x);
    let sy = sy_raw.max(T::zero()).min(max_y);
    // clamped to >= 0, so truncation is floor (and avoids a libm call)
    let x0 = sx.to_usize().unwrap_or(0).min(w - 1);
    let y0 = sy.to_usize().unwrap_or(0).min(h - 1);
    Tap {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        a: sx - T::of_usize(x0),
        b: sy - T::of_usize(y0),
        free_x: sx_raw > T::zero() && sx_raw < max_x,
        free_y: sy_raw > T::zero() && sy_raw < max_y,
    }
}

fn check_sizes<T: Real>(image: &Image<T>, flow: &FlowField<T>) -> Result<()> {
    if image.size() != flow.size() {
        return Err(Error::shape("warp", image.size(), flow.size()));
    }
    Ok(())
}

/// `out(p) = bilinear(image, p + mu * F(p))`, sample coordinates clamped to the border.
pub fn warp<T: Real>(image: &Image<T>, flow: &FlowField<T>, mu: T) -> Result<Image<T>> {
    let (h, w) = image.size();
    let out = warp_window(image, flow, mu, (0, 0, w, h))?;
    Image::new(out)
}

/// [`warp`] evaluated only over the pixel window `(x, y, w, h)`; sampling still sees the whole image.
pub fn warp_window<T: Real>(
    image: &Image<T>,
    flow: &FlowField<T>,
    mu: T,
    window: (usize, usize, usize, usize),
) -> Result<Array3<T>> {
    check_sizes(image, flow)?;
    let (h, w) = image.size();
    let (wx, wy, ww, wh) = window;
    if wx + ww > w || wy + wh > h {
        return Err(Error::Invalid(format!("warp window {window:?} exceeds {w}x{h}")));
    }
    let channels = image.channels();
    let plane = h * w;
    let src = image.data().as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let fl = flow.data().as_standard_layout();
    let (dx, dy) = fl.as_slice().expect("standard layout").split_at(plane);
    let out_plane = ww * wh;
    let mut out = vec![T::zero(); channels * out_plane];
    for y in wy..wy + wh {
        for x in wx..wx + ww {
            let i = y * w + x;
            let o = (y - wy) * ww + (x - wx);
            let t = tap(x, y, dx[i], dy[i], mu, w, h);
            let (r0, r1) = (t.y0 * w, t.y1 * w);
            for c in 0..channels {
                let p = &src[c * plane..(c + 1) * plane];
                let top = lerp(p[r0 + t.x0], p[r0 + t.x1], t.a);
                let bot = lerp(p[r1 + t.x0], p[r1 + t.x1], t.a);
                out[c * out_plane + o] = lerp(top, bot, t.b);
            }
        }
    }
    Ok(Array3::from_shape_vec((channels, wh, ww), out).expect("sized above"))
}

pub struct WarpGrads<T> {
    pub image: Array3<T>,
    pub flow: FlowField<T>,
}

/// Gradients of `<d_out, warp(image, flow, mu)>` with respect to image and flow.
pub fn warp_backward<T: Real>(image: &Image<T>, flow: &FlowField<T>, mu: T, d_out: &Array3<T>) -> Result<WarpGrads<T>> {
    check_sizes(image, flow)?;
    if d_out.dim() != image.data().dim() {
        return Err(Error::shape("warp gradient", image.data().dim(), d_out.dim()));
    }
    let (h, w) = image.size();
    let src = image.data();
    let mut d_image = Array3::zeros(src.raw_dim());
    let mut d_flow = Array3::zeros((2, h, w));
    let one = T::one();
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = flow.at(y, x);
            let t = tap(x, y, fx, fy, mu, w, h);
            let (mut gx, mut gy) = (T::zero(), T::zero());
            for c in 0..image.channels() {
                let g = d_out[[c, y, x]];
                let v00 = src[[c, t.y0, t.x0]];
                let v01 = src[[c, t.y0, t.x1]];
                let v10 = src[[c, t.y1, t.x0]];
                let v11 = src[[c, t.y1, t.x1]];
                d_image[[c, t.y0, t.x0]] += g * (one - t.a) * (one - t.b);
                d_image[[c, t.y0, t.x1]] += g * t.a * (one - t.b);
                d_image[[c, t.y1, t.x0]] += g * (one - t.a) * t.b;
                d_image[[c, t.y1, t.x1]] += g * t.a * t.b;
                if t.free_x && t.x1 != t.x0 {
                    gx += g * ((one - t.b) * (v01 - v00) + t.b * (v11 - v10));
                }
                if t.free_y && t.y1 != t.y0 {
                    gy += g * ((one - t.a) * (v10 - v00) + t.a * (v11 - v01));
                }
            }
            d_flow[[0, y, x]] = gx * mu;
            d_flow[[1, y, x]] = gy * mu;
        }
    }
    Ok(WarpGrads {
        image: d_image,
        flow: FlowField::new(d_flow)?,
    })
}

/// Bilinear upsampling of both channels, with displacements rescaled into target pixels.
pub fn upsample_flow<T: Real>(flow: &FlowField<T>, target: (usize, usize)) -> Result<FlowField<T>> {
    let (h, w) = flow.size();
    let (th, tw) = target;
    if th < h || tw < w {
        return Err(Error::Invalid(format!(
            "upsample target {th}x{tw} is smaller than the source {h}x{w}"
        )));
    }
    if (th, tw) == (h, w) {
        return Ok(flow.clone());
    }
    let sx = T::of_usize(tw) / T::of_usize(w);
    let sy = T::of_usize(th) / T::of_usize(h);
    let mut data = Array3::zeros((2, th, tw));
    data.index_axis_mut(Axis(0), 0)
        .assign(&bilinear_resize(flow.dx(), th, tw).mapv(|v| v * sx));
    data.index_axis_mut(Axis(0), 1)
        .assign(&bilinear_resize(flow.dy(), th, tw).mapv(|v| v * sy));
    FlowField::new(data)
}

/// Resizes a flow to any target size (area averaging when shrinking), rescaling displacements.
pub fn resize_flow<T: Real>(flow: &FlowField<T>, target: (usize, usize)) -> Result<FlowField<T>> {
    let (h, w) = flow.size();
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Invalid("flow resize target must be positive".into()));
    }
    if (th, tw) == (h, w) {
        return Ok(flow.clone());
    }
    let sx = T::of_usize(tw) / T::of_usize(w);
    let sy = T::of_usize(th) / T::of_usize(h);
    let mut data = Array3::zeros((2, th, tw));
    data.index_axis_mut(Axis(0), 0)
        .assign(&resize_plane(flow.dx(), th, tw).mapv(|v| v * sx));
    data.index_axis_mut(Axis(0), 1)
        .assign(&resize_plane(flow.dy(), th, tw).mapv(|v| v * sy));
    FlowField::new(data)
}

/// Color-wheel rendering: hue encodes direction, saturation encodes magnitude relative to
/// the 99th-percentile magnitude; zero flow is white.
pub fn visualize_flow<T: Real>(flow: &FlowField<T>) -> Image<T> {
    let (h, w) = flow.size();
    let mut mags: Vec<f64> = flow.magnitudes().map(Real::as_f64).collect();
    mags.sort_by(f64::total_cmp);
    let p99 = mags[((mags.len() as f64 * 0.99).ceil() as usize).saturating_sub(1)];
    let norm = if p99 > 0.0 { p99 } else { *mags.last().unwrap_or(&0.0) };
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.at(y, x);
            let (dx, dy) = (dx.as_f64(), dy.as_f64());
            let sat = if norm > 0.0 { (dx.hypot(dy) / norm).min(1.0) } else { 0.0 };
            let rgb = hsv_to_rgb(flow_hue(dx, dy), sat, 1.0);
            for c in 0..3 {
                out[[c, y, x]] = T::lit(rgb[c]);
            }
        }
    }
    Image::new(out).expect("three channels")
}

/// Direction of a vector in degrees, `[0, 360)`.
pub fn flow_hue(dx: f64, dy: f64) -> f64 {
    dy.atan2(dx).to_degrees().rem_euclid(360.0)
}

pub fn hsv_to_rgb(hue: f64, sat: f64, val: f64) -> [f64; 3] {
    let c = val * sat;
    let hp = hue / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r + m, g + m, b + m]
}

/// Hue in degrees of an RGB triple (`None` for greys).
pub fn rgb_hue(rgb: [f64; 3]) -> Option<f64> {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d <= 1e-12 {
        return None;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    Some(h * 60.0)
}
