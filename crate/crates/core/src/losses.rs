//! Training objectives: image L1, flow L1, flow/limb orthogonality, and their weighted sum.

use ndarray::{Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::imaging::Image;
use crate::priors::PafStack;
use crate::scalar::Real;

/// Magnitude below which a vector counts as absent in the orthogonality term.
pub const ORTH_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_img: f64,
    pub lambda_flow: f64,
    pub lambda_orth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_img: 15.0,
            lambda_flow: 15.0,
            lambda_orth: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_img, self.lambda_flow, self.lambda_orth];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative, got {all:?}")));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        LossWeights {
            lambda_img: self.lambda_img * factor,
            lambda_flow: self.lambda_flow * factor,
            lambda_orth: self.lambda_orth * factor,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub img: f64,
    pub flow: f64,
    pub orth: f64,
}

pub fn total_loss(parts: LossParts, w: &LossWeights) -> f64 {
    w.lambda_img * parts.img + w.lambda_flow * parts.flow + w.lambda_orth * parts.orth
}

fn l1<T: Real>(a: ArrayView3<T>, b: ArrayView3<T>, context: &'static str) -> Result<T> {
    if a.dim() != b.dim() {
        return Err(Error::shape(context, a.dim(), b.dim()));
    }
    let mut sum = T::zero();
    Zip::from(&a).and(&b).for_each(|&x, &y| sum += (x - y).abs());
    Ok(sum / T::of_usize(a.len()))
}

fn l1_grad<T: Real>(a: ArrayView3<T>, b: ArrayView3<T>) -> Array3<T> {
    let n = T::of_usize(a.len());
    let mut g = Array3::zeros(a.raw_dim());
    Zip::from(&mut g).and(&a).and(&b).for_each(|g, &x, &y| {
        *g = if x > y {
            T::one() / n
        } else if x < y {
            -T::one() / n
        } else {
            T::zero()
        }
    });
    g
}

/// Mean absolute difference over all channels and pixels.
pub fn loss_img<T: Real>(output: &Image<T>, target: &Image<T>) -> Result<T> {
    l1(output.view(), target.view(), "image loss")
}

/// `d loss_img / d output`.
pub fn loss_img_grad<T: Real>(output: &Image<T>, target: &Image<T>) -> Result<Array3<T>> {
    if output.data().dim() != target.data().dim() {
        return Err(Error::shape("image loss", output.data().dim(), target.data().dim()));
    }
    Ok(l1_grad(output.view(), target.view()))
}

/// Mean absolute difference over both flow channels.
pub fn loss_flow<T: Real>(pred: &FlowField<T>, gt: &FlowField<T>) -> Result<T> {
    l1(pred.data().view(), gt.data().view(), "flow loss")
}

pub fn loss_flow_grad<T: Real>(pred: &FlowField<T>, gt: &FlowField<T>) -> Result<Array3<T>> {
    if pred.size() != gt.size() {
        return Err(Error::shape("flow loss", pred.size(), gt.size()));
    }
    Ok(l1_grad(pred.data().view(), gt.data().view()))
}

/// Mean `|cos|` between flow and channel-summed limb direction over supported pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrthLoss<T> {
    pub value: T,
    /// Pixels where both vectors exceed [`ORTH_EPS`].
    pub supported: usize,
}

impl<T: Real> OrthLoss<T> {
    pub fn no_support(&self) -> bool {
        self.supported == 0
    }
}

fn orth_pixels<T: Real>(pred: &FlowField<T>, limb_dir: ArrayView3<T>) -> Result<()> {
    let (h, w) = pred.size();
    if limb_dir.dim() != (2, h, w) {
        return Err(Error::shape("orthogonality loss", (2, h, w), limb_dir.dim()));
    }
    Ok(())
}

/// Orthogonality term against a precomputed `2 × H × W` summed limb field.
pub fn loss_orth_summed<T: Real>(pred: &FlowField<T>, limb_dir: ArrayView3<T>) -> Result<OrthLoss<T>> {
    orth_pixels(pred, limb_dir)?;
    let eps = T::lit(ORTH_EPS);
    let f = pred.data();
    let mut sum = T::zero();
    let mut supported = 0;
    Zip::from(f.index_axis(ndarray::Axis(0), 0))
        .and(f.index_axis(ndarray::Axis(0), 1))
        .and(limb_dir.index_axis(ndarray::Axis(0), 0))
        .and(limb_dir.index_axis(ndarray::Axis(0), 1))
        .for_each(|&fx, &fy, &vx, &vy| {
            let nf = fx.hypot(fy);
            let nv = vx.hypot(vy);
            if nf > eps && nv > eps {
                sum += ((fx * vx + fy * vy) / (nf * nv)).abs();
                supported += 1;
            }
        });
    let value = if supported == 0 {
        T::zero()
    } else {
        sum / T::of_usize(supported)
    };
    Ok(OrthLoss { value, supported })
}

pub fn loss_orth<T: Real>(pred: &FlowField<T>, pafs: &PafStack<T>) -> Result<OrthLoss<T>> {
    loss_orth_summed(pred, pafs.summed().view())
}

/// `d loss_orth / d pred`.
pub fn loss_orth_grad<T: Real>(pred: &FlowField<T>, limb_dir: ArrayView3<T>) -> Result<Array3<T>> {
    let count = loss_orth_summed(pred, limb_dir)?.supported;
    let (h, w) = pred.size();
    let mut g = Array3::zeros((2, h, w));
    if count == 0 {
        return Ok(g);
    }
    let eps = T::lit(ORTH_EPS);
    let n = T::of_usize(count);
    let f = pred.data();
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (f[[0, y, x]], f[[1, y, x]]);
            let (vx, vy) = (limb_dir[[0, y, x]], limb_dir[[1, y, x]]);
            let nf = fx.hypot(fy);
            let nv = vx.hypot(vy);
            if nf <= eps || nv <= eps {
                continue;
            }
            let cos = (fx * vx + fy * vy) / (nf * nv);
            let sign = if cos > T::zero() {
                T::one()
            } else if cos < T::zero() {
                -T::one()
            } else {
                continue;
            };
            let a = T::one() / (nf * nv);
            let b = cos / (nf * nf);
            g[[0, y, x]] = sign * (vx * a - fx * b) / n;
            g[[1, y, x]] = sign * (vy * a - fy * b) / n;
        }
    }
    Ok(g)
}
