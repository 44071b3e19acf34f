//! Flip / rotate / crop augmentation applied identically to images, priors and flow.

use ndarray::{Array3, Array4, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SamplePair;
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::imaging::Image;
use crate::keypoints::LimbTopology;
use crate::priors::{PafStack, SkeletonMaps};
use crate::scalar::Real;

/// Crop window relative to the image, all fields in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl RelBox {
    pub const FULL: RelBox = RelBox {
        x: 0.0,
        y: 0.0,
        w: 1.0,
        h: 1.0,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub hflip: bool,
    /// Degrees; positive values turn content vectors from +x towards +y.
    pub rotation_deg: f64,
    pub crop: RelBox,
    pub seed: u64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            hflip: false,
            rotation_deg: 0.0,
            crop: RelBox::FULL,
            seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && self.rotation_deg == 0.0 && self.crop == RelBox::FULL
    }

    fn validate(&self, (h, w): (usize, usize)) -> Result<()> {
        let c = self.crop;
        let finite = [self.rotation_deg, c.x, c.y, c.w, c.h].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Invalid("augmentation parameters must be finite".into()));
        }
        if c.w * w as f64 <= 0.0 || c.h * h as f64 <= 0.0 {
            return Err(Error::Invalid(format!("degenerate crop {c:?}")));
        }
        let tol = 1e-9;
        if c.x < -tol || c.y < -tol || c.x + c.w > 1.0 + tol || c.y + c.h > 1.0 + tol {
            return Err(Error::Invalid(format!("crop {c:?} leaves the image")));
        }
        Ok(())
    }
}

/// Sampling ranges for random augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentRanges {
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    /// Smallest crop side relative to the image; the aspect ratio is kept.
    pub min_crop_scale: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            flip_prob: 0.5,
            max_rotation_deg: 15.0,
            min_crop_scale: 0.85,
        }
    }
}

impl AugmentRanges {
    pub fn none() -> Self {
        AugmentRanges {
            flip_prob: 0.0,
            max_rotation_deg: 0.0,
            min_crop_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.flip_prob)
            && (0.0..=180.0).contains(&self.max_rotation_deg)
            && self.min_crop_scale > 0.0
            && self.min_crop_scale <= 1.0;
        if !ok {
            return Err(Error::Config(format!("invalid augmentation ranges {self:?}")));
        }
        Ok(())
    }

    pub fn is_none(&self) -> bool {
        self.flip_prob == 0.0 && self.max_rotation_deg == 0.0 && self.min_crop_scale == 1.0
    }

    /// Deterministic in `seed`.
    pub fn sample(&self, seed: u64) -> AugmentParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hflip = rng.random::<f64>() < self.flip_prob;
        let rotation_deg = if self.max_rotation_deg > 0.0 {
            rng.random_range(-self.max_rotation_deg..=self.max_rotation_deg)
        } else {
            0.0
        };
        let scale = if self.min_crop_scale < 1.0 {
            rng.random_range(self.min_crop_scale..=1.0)
        } else {
            1.0
        };
        let crop = RelBox {
            x: rng.random::<f64>() * (1.0 - scale),
            y: rng.random::<f64>() * (1.0 - scale),
            w: scale,
            h: scale,
        };
        AugmentParams {
            hflip,
            rotation_deg,
            crop,
            seed,
        }
    }
}

/// Output-to-input pixel map `p = A q + t`.
struct Affine {
    a: [[f64; 2]; 2],
    t: [f64; 2],
    /// `A^-1`, which carries input-frame vectors into the output frame.
    inv: [[f64; 2]; 2],
}

impl Affine {
    fn new(params: &AugmentParams, (h, w): (usize, usize)) -> Self {
        let (wf, hf) = (w as f64, h as f64);
        let fl = if params.hflip { -1.0 } else { 1.0 };
        let ft = if params.hflip { wf - 1.0 } else { 0.0 };
        let (sx, sy) = (params.crop.w, params.crop.h);
        let (cx, cy) = (params.crop.x * wf - 0.5 + 0.5 * sx, params.crop.y * hf - 0.5 + 0.5 * sy);
        let (sin, cos) = params.rotation_deg.to_radians().sin_cos();
        // R(-theta) about the image centre
        let r = [[cos, sin], [-sin, cos]];
        let c0 = [(wf - 1.0) / 2.0, (hf - 1.0) / 2.0];
        // q -> flip -> crop: q2 = diag(sx*fl, sy) q + (sx*ft + cx, cy)
        let m = [[sx * fl, 0.0], [0.0, sy]];
        let m_t = [sx * ft + cx, cy];
        let a = [
            [r[0][0] * m[0][0], r[0][1] * m[1][1]],
            [r[1][0] * m[0][0], r[1][1] * m[1][1]],
        ];
        let t = [
            r[0][0] * (m_t[0] - c0[0]) + r[0][1] * (m_t[1] - c0[1]) + c0[0],
            r[1][0] * (m_t[0] - c0[0]) + r[1][1] * (m_t[1] - c0[1]) + c0[1],
        ];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
        Affine { a, t, inv }
    }

    fn apply(&self, x: usize, y: usize) -> (f64, f64) {
        let (x, y) = (x as f64, y as f64);
        (
            self.a[0][0] * x + self.a[0][1] * y + self.t[0],
            self.a[1][0] * x + self.a[1][1] * y + self.t[1],
        )
    }

    fn vector(&self, vx: f64, vy: f64) -> (f64, f64) {
        (
            self.inv[0][0] * vx + self.inv[0][1] * vy,
            self.inv[1][0] * vx + self.inv[1][1] * vy,
        )
    }
}

#[derive(Clone, Copy)]
enum Border {
    Clamp,
    Zero,
}

fn bilinear<T: Real>(plane: ArrayView2<T>, x: f64, y: f64, border: Border) -> T {
    let (h, w) = plane.dim();
    let (x, y) = match border {
        Border::Clamp => (x.clamp(0.0, (w - 1) as f64), y.clamp(0.0, (h - 1) as f64)),
        Border::Zero => {
            if x <= -1.0 || y <= -1.0 || x >= w as f64 || y >= h as f64 {
                return T::zero();
            }
            (x, y)
        }
    };
    let (x0, y0) = (x.floor(), y.floor());
    let (a, b) = (T::lit(x - x0), T::lit(y - y0));
    let at = |yy: f64, xx: f64| -> T {
        if xx < 0.0 || yy < 0.0 || xx > (w - 1) as f64 || yy > (h - 1) as f64 {
            T::zero()
        } else {
            plane[[yy as usize, xx as usize]]
        }
    };
    let x1 = if matches!(border, Border::Clamp) { (x0 + 1.0).min((w - 1) as f64) } else { x0 + 1.0 };
    let y1 = if matches!(border, Border::Clamp) { (y0 + 1.0).min((h - 1) as f64) } else { y0 + 1.0 };
    let (v00, v01, v10, v11) = (at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1));
    let top = v00 + a * (v01 - v00);
    let bot = v10 + a * (v11 - v10);
    top + b * (bot - top)
}

fn source_channel(c: usize, flip: bool) -> usize {
    if flip {
        LimbTopology::mirror_channel(c)
    } else {
        c
    }
}

/// Applies one geometric transform to every component of a pair.
///
/// Images and flow use clamped bilinear sampling, skeleton maps use zero padding, and
/// PAF supports use nearest-neighbour sampling so they stay binary. PAF and flow
/// vectors are carried into the output frame by the inverse linear map, which rotates
/// them, negates x under a flip and rescales by the crop factor; PAF vectors are then
/// renormalized. A flip also swaps left/right limb channels.
pub fn augment<T: Real>(pair: &SamplePair<T>, params: &AugmentParams) -> Result<SamplePair<T>> {
    let size = pair.size();
    params.validate(size)?;
    if params.is_identity() {
        return Ok(pair.clone());
    }
    let (h, w) = size;
    let map = Affine::new(params, size);
    let coords: Vec<(f64, f64)> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| map.apply(x, y)).collect();

    let resample = |data: &Array3<T>, border: Border, mirror: bool| -> Array3<T> {
        let n = data.dim().0;
        let mut out = Array3::zeros((n, h, w));
        for c in 0..n {
            let src = data.index_axis(ndarray::Axis(0), source_channel(c, mirror && params.hflip));
            for (i, &(px, py)) in coords.iter().enumerate() {
                out[[c, i / w, i % w]] = bilinear(src, px, py, border);
            }
        }
        out
    };

    let source = Image::new(resample(pair.source.data(), Border::Clamp, false))?;
    let target = Image::new(resample(pair.target.data(), Border::Clamp, false))?;
    let skeletons = SkeletonMaps {
        data: resample(&pair.skeletons.data, Border::Zero, true),
    };

    let src_vec = &pair.pafs.vectors;
    let mut vectors = Array4::zeros(src_vec.raw_dim());
    for c in 0..src_vec.dim().0 {
        let sc = source_channel(c, params.hflip);
        for (i, &(px, py)) in coords.iter().enumerate() {
            let (ix, iy) = (px.round(), py.round());
            if ix < 0.0 || iy < 0.0 || ix > (w - 1) as f64 || iy > (h - 1) as f64 {
                continue;
            }
            let (ix, iy) = (ix as usize, iy as usize);
            let (vx, vy) = (src_vec[[sc, iy, ix, 0]].as_f64(), src_vec[[sc, iy, ix, 1]].as_f64());
            if vx == 0.0 && vy == 0.0 {
                continue;
            }
            let (ox, oy) = map.vector(vx, vy);
            let n = ox.hypot(oy);
            vectors[[c, i / w, i % w, 0]] = T::lit(ox / n);
            vectors[[c, i / w, i % w, 1]] = T::lit(oy / n);
        }
    }
    let pafs = PafStack {
        warnings: pair.pafs.warnings.clone(),
        ..PafStack::from_vectors(vectors)
    };

    let gt_flow = match &pair.gt_flow {
        Some(flow) => {
            let mut out = Array3::zeros((2, h, w));
            for (i, &(px, py)) in coords.iter().enumerate() {
                let fx = bilinear(flow.dx(), px, py, Border::Clamp).as_f64();
                let fy = bilinear(flow.dy(), px, py, Border::Clamp).as_f64();
                let (ox, oy) = map.vector(fx, fy);
                out[[0, i / w, i % w]] = T::lit(ox);
                out[[1, i / w, i % w]] = T::lit(oy);
            }
            Some(FlowField::new(out)?)
        }
        None => None,
    };

    Ok(SamplePair {
        id: pair.id.clone(),
        source,
        target,
        skeletons,
        pafs,
        gt_flow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    fn pair() -> SamplePair<f64> {
        synth_dataset::<f64>(1, 11, 1.0, 0.0).unwrap().remove(0)
    }

    fn params(hflip: bool, rotation_deg: f64) -> AugmentParams {
        AugmentParams {
            hflip,
            rotation_deg,
            ..AugmentParams::identity()
        }
    }

    #[test]
    fn identity_leaves_pair_unchanged() {
        let p = pair();
        assert_eq!(augment(&p, &AugmentParams::identity()).unwrap(), p);
        assert_eq!(augment(&p, &AugmentRanges::none().sample(5)).unwrap(), p);
    }

    #[test]
    fn hflip_reflects_flow_vectors() {
        let mut p = pair();
        p.gt_flow = Some(FlowField::constant(256, 256, 2.0, 1.0));
        let out = augment(&p, &params(true, 0.0)).unwrap();
        let f = out.gt_flow.unwrap();
        assert_eq!(f.at(17, 255 - 40), (-2.0, 1.0));
        assert_eq!(out.source.data()[[1, 17, 255 - 40]], p.source.data()[[1, 17, 40]]);
        // left/right channels swap
        assert_eq!(
            out.skeletons.data[[1, 30, 255 - 60]],
            p.skeletons.data[[0, 30, 60]]
        );
    }

    #[test]
    fn flip_twice_is_identity() {
        let p = pair();
        let once = augment(&p, &params(true, 0.0)).unwrap();
        let twice = augment(&once, &params(true, 0.0)).unwrap();
        assert_eq!(twice.source, p.source);
        assert_eq!(twice.skeletons, p.skeletons);
        assert_eq!(twice.gt_flow, p.gt_flow);
        let diff = (&twice.pafs.vectors - &p.pafs.vectors).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d < 1e-12));
    }

    #[test]
    fn rotating_a_paf_vector_by_90_degrees() {
        let mut p = pair();
        p.pafs = PafStack::from_vectors(Array4::from_shape_fn((10, 256, 256, 2), |(_, _, _, k)| if k == 0 { 1.0 } else { 0.0 }));
        let out = augment(&p, &params(false, 90.0)).unwrap();
        let (vx, vy) = (out.pafs.vectors[[0, 128, 128, 0]], out.pafs.vectors[[0, 128, 128, 1]]);
        assert!(vx.abs() < 1e-9 && (vy - 1.0).abs() < 1e-9, "({vx}, {vy})");
    }

    #[test]
    fn rotation_round_trip_within_interpolation_tolerance() {
        let p = pair();
        for theta in [7.0, -15.0] {
            let there = augment(&p, &params(false, theta)).unwrap();
            let back = augment(&there, &params(false, -theta)).unwrap();
            // compare where neither leg sampled outside the frame
            let (mut sum, mut n) = (0.0, 0);
            for y in 0..256 {
                for x in 0..256 {
                    let (dx, dy) = (x as f64 - 127.5, y as f64 - 127.5);
                    if dx.hypot(dy) < 120.0 {
                        for c in 0..3 {
                            sum += (back.source.data()[[c, y, x]] - p.source.data()[[c, y, x]]).abs();
                            n += 1;
                        }
                        let (a, b) = (back.gt_flow.as_ref().unwrap().at(y, x), p.gt_flow.as_ref().unwrap().at(y, x));
                        sum += ((a.0 - b.0).abs() + (a.1 - b.1).abs()) / 256.0;
                    }
                }
            }
            let mean = sum / n as f64;
            assert!(mean < 1e-2, "theta {theta}: {mean}");
        }
    }

    #[test]
    fn crop_rescales_flow() {
        let mut p = pair();
        p.gt_flow = Some(FlowField::constant(256, 256, 1.0, -1.0));
        let prm = AugmentParams {
            crop: RelBox {
                x: 0.1,
                y: 0.05,
                w: 0.8,
                h: 0.8,
            },
            ..AugmentParams::identity()
        };
        let f = augment(&p, &prm).unwrap().gt_flow.unwrap();
        assert!(f.dx().iter().all(|&v| (v - 1.25).abs() < 1e-12));
        assert!(f.dy().iter().all(|&v| (v + 1.25).abs() < 1e-12));
    }

    #[test]
    fn degenerate_crop_is_rejected() {
        let p = pair();
        let mut prm = AugmentParams::identity();
        prm.crop.w = 0.0;
        assert!(augment(&p, &prm).is_err());
        prm.crop = RelBox {
            x: 0.5,
            y: 0.0,
            w: 0.8,
            h: 1.0,
        };
        assert!(augment(&p, &prm).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        let r = AugmentRanges::default();
        assert_eq!(r.sample(3), r.sample(3));
        for s in 0..200 {
            let p = r.sample(s);
            assert!(p.rotation_deg.abs() <= 15.0);
            assert!(p.crop.w >= 0.85 && p.crop.x + p.crop.w <= 1.0 + 1e-12);
        }
    }
}
