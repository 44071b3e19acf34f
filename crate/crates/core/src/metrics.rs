//! Image similarity and flow accuracy metrics.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::imaging::Image;
use crate::scalar::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering with the Gaussian window.
fn filter_valid(plane: ArrayView2<f64>, taps: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            rows[[y, x]] = (0..SSIM_WINDOW).map(|k| taps[k] * plane[[y, x + k]]).sum::<f64>();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = (0..SSIM_WINDOW).map(|k| taps[k] * rows[[y + k, x]]).sum::<f64>();
        }
    }
    out
}

fn same_shape<T: Real>(a: &Image<T>, b: &Image<T>, what: &'static str) -> Result<()> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::shape(what, a.data().dim(), b.data().dim()));
    }
    Ok(())
}

/// Single-scale SSIM (dynamic range 1), averaged over valid window positions and channels.
pub fn ssim<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let (h, w) = a.size();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Invalid(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}")));
    }
    let taps = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for c in 0..a.channels() {
        let x = a.data().index_axis(Axis(0), c).mapv(Real::as_f64);
        let y = b.data().index_axis(Axis(0), c).mapv(Real::as_f64);
        let mx = filter_valid(x.view(), &taps);
        let my = filter_valid(y.view(), &taps);
        let mxx = filter_valid((&x * &x).view(), &taps);
        let myy = filter_valid((&y * &y).view(), &taps);
        let mxy = filter_valid((&x * &y).view(), &taps);
        let mut sum = 0.0;
        Zip::from(&mx).and(&my).and(&mxx).and(&myy).and(&mxy).for_each(|&ux, &uy, &xx, &yy, &xy| {
            let vx = xx - ux * ux;
            let vy = yy - uy * uy;
            let cov = xy - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        });
        total += sum / mx.len() as f64;
    }
    Ok(total / a.channels() as f64)
}

pub fn mse<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    same_shape(a, b, "mse")?;
    let mut sum = 0.0;
    Zip::from(a.data()).and(b.data()).for_each(|&x, &y| {
        let d = x.as_f64() - y.as_f64();
        sum += d * d;
    });
    Ok(sum / a.data().len() as f64)
}

/// `10·log10(1 / MSE)` in dB, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Mean end-point error in pixels.
pub fn epe<T: Real>(pred: &FlowField<T>, gt: &FlowField<T>) -> Result<f64> {
    if pred.size() != gt.size() {
        return Err(Error::shape("epe", pred.size(), gt.size()));
    }
    let (p, g) = (pred.data(), gt.data());
    let mut sum = 0.0;
    Zip::from(p.index_axis(Axis(0), 0))
        .and(p.index_axis(Axis(0), 1))
        .and(g.index_axis(Axis(0), 0))
        .and(g.index_axis(Axis(0), 1))
        .for_each(|&px, &py, &gx, &gy| {
            sum += (px.as_f64() - gx.as_f64()).hypot(py.as_f64() - gy.as_f64());
        });
    let (h, w) = pred.size();
    Ok(sum / (h * w) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub ssim: f64,
    pub psnr: f64,
    pub epe: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
    pub count: usize,
    pub ssim: f64,
    pub psnr: f64,
    /// Mean over the samples that have a ground-truth flow.
    pub epe: Option<f64>,
    /// Filled only by an external perceptual-metric plug-in.
    pub lpips: Option<f64>,
}

impl MetricReport {
    pub fn from_samples(samples: Vec<SampleMetrics>) -> Self {
        let count = samples.len();
        let mean = |f: &dyn Fn(&SampleMetrics) -> f64| {
            if count == 0 {
                0.0
            } else {
                samples.iter().map(f).sum::<f64>() / count as f64
            }
        };
        let ssim = mean(&|s| s.ssim);
        let psnr = mean(&|s| s.psnr);
        let flows: Vec<f64> = samples.iter().filter_map(|s| s.epe).collect();
        let epe = (!flows.is_empty()).then(|| flows.iter().sum::<f64>() / flows.len() as f64);
        MetricReport {
            samples,
            count,
            ssim,
            psnr,
            epe,
            lpips: None,
        }
    }
}

/// Plain-text comparison table: `Method | SSIM ↑ | PSNR ↑ | LPIPS ↓ | EPE ↓`.
pub fn render_table(rows: &[(String, &MetricReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut out = format!(
        "{:<width$} | {:>8} | {:>8} | {:>8} | {:>8}\n",
        "Method", "SSIM ↑", "PSNR ↑", "LPIPS ↓", "EPE ↓"
    );
    out.push_str(&format!("{}\n", "-".repeat(width + 46)));
    let opt = |v: Option<f64>, digits: usize| match v {
        Some(v) => format!("{v:.digits$}"),
        None => "N.A.".to_string(),
    };
    for (name, r) in rows {
        out.push_str(&format!(
            "{:<width$} | {:>8.4} | {:>8.4} | {:>8} | {:>8}\n",
            name,
            r.ssim,
            r.psnr,
            opt(r.lpips, 4),
            opt(r.epe, 2)
        ));
    }
    out
}
