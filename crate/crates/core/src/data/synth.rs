//! Synthetic training pairs: procedurally posed figures and an analytic, limb-anchored
//! compression flow that serves as noise-free ground truth.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{build_priors, SamplePair, INPUT_SIZE};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::imaging::Image;
use crate::keypoints::{Joint, KeypointSet, LimbTopology, NUM_JOINTS};
use crate::priors::{segment_distance, PafStack};
use crate::scalar::Real;
use crate::warp::warp;

/// Shape of the per-limb displacement profile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthProfile {
    /// Gaussian width as a fraction of limb length.
    pub sigma_frac: f64,
    pub min_sigma: f64,
    /// Peak displacement in units of sigma at strength 1.
    pub amplitude: f64,
    /// Length of the along-axis fade-in at either end, as a fraction of limb length.
    pub ramp_frac: f64,
    /// Pixels next to each joint where the profile is exactly zero.
    pub joint_margin: f64,
}

impl Default for SynthProfile {
    fn default() -> Self {
        SynthProfile {
            sigma_frac: 0.36,
            min_sigma: 6.0,
            amplitude: 1.3,
            ramp_frac: 0.25,
            joint_margin: 0.0,
        }
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Sum over PAF limbs of `g(d) h(s) n`, where `d` is the signed distance across the limb
/// axis, `s` the position along it and `n` the axis normal.
///
/// `g(d) = A (d / sigma) exp(1/2 - d^2 / 2 sigma^2) (1 - (d / 3 sigma)^2)^2` on `|d| < 3 sigma`
/// peaks at `|d| = sigma` and points away from the axis, so the backward warp pulls the
/// limb's outline inward. `h` fades in from each joint. Where neighbouring profiles
/// overlap their sum is no longer perpendicular to either limb, so wherever the PAFs
/// are non-zero the along-limb component (along the summed PAF vector) is projected out.
pub fn synth_flow<T: Real>(
    kp: &KeypointSet,
    pafs: &PafStack<T>,
    strength: f64,
    profile: &SynthProfile,
) -> Result<FlowField<T>> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::Invalid(format!("synthesis strength {strength} outside [0, 1]")));
    }
    let size = pafs.size();
    let (h, w) = size;
    let kp = if (kp.height(), kp.width()) == size {
        kp.clone()
    } else {
        kp.rescaled(w, h)
    };
    let mut limbs = Vec::new();
    for &(ia, ib) in &LimbTopology::PAF_LIMBS {
        let (ja, jb) = (kp.joint(ia), kp.joint(ib));
        if !(ja.is_valid() && jb.is_valid()) {
            continue;
        }
        let len = (jb.x - ja.x).hypot(jb.y - ja.y);
        if len >= 1.0 {
            limbs.push(((ja.x, ja.y), (jb.x, jb.y), len));
        }
    }
    if limbs.is_empty() {
        return Err(Error::Invalid("keypoints contain no valid limb".into()));
    }
    let mut data = Array3::<f64>::zeros((2, h, w));
    if strength > 0.0 {
        for &(a, b, len) in &limbs {
            add_limb(&mut data, a, b, len, strength, profile);
        }
        let v = pafs.summed();
        for y in 0..h {
            for x in 0..w {
                let (vx, vy) = (v[[0, y, x]].as_f64(), v[[1, y, x]].as_f64());
                let n = vx.hypot(vy);
                if n > 0.0 {
                    let (ux, uy) = (vx / n, vy / n);
                    let along = data[[0, y, x]] * ux + data[[1, y, x]] * uy;
                    data[[0, y, x]] -= along * ux;
                    data[[1, y, x]] -= along * uy;
                }
            }
        }
    }
    FlowField::new(data.mapv(T::lit))
}

fn add_limb(data: &mut Array3<f64>, a: (f64, f64), b: (f64, f64), len: f64, strength: f64, p: &SynthProfile) {
    let (_, h, w) = data.dim();
    let (ux, uy) = ((b.0 - a.0) / len, (b.1 - a.1) / len);
    let (nx, ny) = (-uy, ux);
    let sigma = (p.sigma_frac * len).max(p.min_sigma);
    let amp = p.amplitude * sigma * strength;
    let reach = 3.0 * sigma;
    let margin = p.joint_margin;
    let ramp = (p.ramp_frac * len).max(1.0);
    let x0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
    let x1 = ((a.0.max(b.0) + reach).ceil().max(0.0) as usize).min(w - 1);
    let y0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
    let y1 = ((a.1.max(b.1) + reach).ceil().max(0.0) as usize).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 - a.0, y as f64 - a.1);
            let s = px * ux + py * uy;
            let d = px * nx + py * ny;
            if d.abs() >= reach || s <= margin || s >= len - margin {
                continue;
            }
            let along = smoothstep((s - margin) / ramp) * smoothstep((len - margin - s) / ramp);
            let r = d / sigma;
            let window = (1.0 - (d / reach).powi(2)).powi(2);
            let g = amp * r * (0.5 - 0.5 * r * r).exp() * window * along;
            data[[0, y, x]] += g * nx;
            data[[1, y, x]] += g * ny;
        }
    }
}

/// Builds a training pair whose target is the source warped by the analytic flow.
///
/// The pair is a deterministic function of `(image, kp, strength)`; `seed` only names it.
pub fn synth_pair<T: Real>(image: &Image<T>, kp: &KeypointSet, strength: f64, seed: u64) -> Result<SamplePair<T>> {
    synth_pair_with(image, kp, strength, seed, &SynthProfile::default())
}

pub fn synth_pair_with<T: Real>(
    image: &Image<T>,
    kp: &KeypointSet,
    strength: f64,
    seed: u64,
    profile: &SynthProfile,
) -> Result<SamplePair<T>> {
    let size = (INPUT_SIZE, INPUT_SIZE);
    let source = if image.size() == size {
        image.to_rgb()
    } else {
        image.to_rgb().resized(size.0, size.1)
    };
    let kp = kp.rescaled(INPUT_SIZE, INPUT_SIZE);
    let (skeletons, pafs) = build_priors(&kp, size)?;
    let flow = synth_flow(&kp, &pafs, strength, profile)?;
    let target = warp(&source, &flow, T::one())?;
    Ok(SamplePair {
        id: format!("synth-{seed:016x}"),
        source,
        target,
        skeletons,
        pafs,
        gt_flow: Some(flow),
    })
}

/// A standing, front-facing figure with randomized proportions and limb angles that
/// fits inside the frame. Left joints sit on the image right.
pub fn random_pose<R: Rng>(rng: &mut R, size: (usize, usize)) -> KeypointSet {
    let (h, w) = size;
    loop {
        let height = h as f64 * rng.random_range(0.80..0.92);
        let jitter = |rng: &mut R| rng.random_range(0.95..1.05);
        let torso = height * rng.random_range(0.30..0.34);
        let shoulder = height * rng.random_range(0.10..0.125);
        let hip = height * rng.random_range(0.065..0.085);
        let upper_arm = height * 0.17 * jitter(rng);
        let forearm = height * 0.15 * jitter(rng);
        let thigh = height * 0.24 * jitter(rng);
        let calf = height * 0.22 * jitter(rng);

        // body frame: origin at the hip centre, y down, +x is the figure's left
        let mut pts = [(0.0f64, 0.0f64); NUM_JOINTS];
        let head_y = -torso - 0.09 * height;
        pts[0] = (0.0, head_y);
        pts[1] = (0.025 * height, head_y - 0.012 * height);
        pts[2] = (-0.025 * height, head_y - 0.012 * height);
        pts[3] = (0.045 * height, head_y);
        pts[4] = (-0.045 * height, head_y);
        pts[5] = (shoulder, -torso);
        pts[6] = (-shoulder, -torso);
        pts[11] = (hip, 0.0);
        pts[12] = (-hip, 0.0);
        for (side, sh, el, wr, hp, kn, an) in [(1.0, 5, 7, 9, 11, 13, 15), (-1.0, 6, 8, 10, 12, 14, 16)] {
            let a1: f64 = rng.random_range(0.15..1.0);
            let a2 = a1 + rng.random_range(-0.3..0.6);
            pts[el] = (pts[sh].0 + side * upper_arm * a1.sin(), pts[sh].1 + upper_arm * a1.cos());
            pts[wr] = (pts[el].0 + side * forearm * a2.sin(), pts[el].1 + forearm * a2.cos());
            let l1: f64 = rng.random_range(0.0..0.3);
            let l2 = l1 + rng.random_range(-0.15..0.15);
            pts[kn] = (pts[hp].0 + side * thigh * l1.sin(), pts[hp].1 + thigh * l1.cos());
            pts[an] = (pts[kn].0 + side * calf * l2.sin(), pts[kn].1 + calf * l2.cos());
        }

        let tilt: f64 = rng.random_range(-8f64..8.0).to_radians();
        let (sin, cos) = tilt.sin_cos();
        let top = rng.random_range(0.3..0.7) * (h as f64 - height);
        let origin = (w as f64 * rng.random_range(0.42..0.58), top + 0.13 * height + torso);
        let joints: [Joint; NUM_JOINTS] = std::array::from_fn(|i| {
            let (x, y) = pts[i];
            Joint {
                x: origin.0 + cos * x - sin * y,
                y: origin.1 + sin * x + cos * y,
                confidence: 1.0,
            }
        });
        let margin = 3.0;
        let fits = joints
            .iter()
            .all(|j| j.x >= margin && j.x <= w as f64 - 1.0 - margin && j.y >= margin && j.y <= h as f64 - 1.0 - margin);
        if fits {
            return KeypointSet::new(joints, w, h).expect("joints lie inside the frame");
        }
    }
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(0.1..0.9))
}

/// Draws a shaded capsule figure over a smooth textured background.
pub fn render_figure<T: Real, R: Rng>(kp: &KeypointSet, rng: &mut R, size: (usize, usize)) -> Image<T> {
    let (h, w) = size;
    let kp = if (kp.height(), kp.width()) == size {
        kp.clone()
    } else {
        kp.rescaled(w, h)
    };
    let tau = std::f64::consts::TAU;
    let mut img = Array3::<f64>::zeros((3, h, w));
    for c in 0..3 {
        let base = rng.random_range(0.25..0.75);
        let (fx, fy, phase): (f64, f64, f64) =
            (rng.random_range(0.5..3.0), rng.random_range(0.5..3.0), rng.random_range(0.0..tau));
        let (gx, gy) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
                img[[c, y, x]] = base + 0.12 * (tau * (fx * u + fy * v) + phase).sin() + gx * (u - 0.5) + gy * (v - 0.5);
            }
        }
    }

    let j = |i: usize| (kp.joint(i).x, kp.joint(i).y);
    let mid = |a: usize, b: usize| ((j(a).0 + j(b).0) / 2.0, (j(a).1 + j(b).1) / 2.0);
    let (sm, hm) = (mid(5, 6), mid(11, 12));
    let scale = (sm.0 - hm.0).hypot(sm.1 - hm.1).max(8.0);
    let (shirt, pants, skin) = (random_color(rng), random_color(rng), random_color(rng));
    let stripe = rng.random_range(3.0..7.0);

    for (a, b, r) in [(11, 13, 0.22), (13, 15, 0.17), (12, 14, 0.22), (14, 16, 0.17)] {
        capsule(&mut img, j(a), j(b), r * scale, pants, stripe);
    }
    quad(&mut img, [j(5), j(6), j(12), j(11)], shirt, stripe);
    for (a, b, r, col) in [(5, 7, 0.16, shirt), (7, 9, 0.13, skin), (6, 8, 0.16, shirt), (8, 10, 0.13, skin)] {
        capsule(&mut img, j(a), j(b), r * scale, col, stripe);
    }
    let neck = (sm.0 * 0.6 + j(0).0 * 0.4, sm.1 * 0.6 + j(0).1 * 0.4);
    capsule(&mut img, neck, j(0), 0.3 * scale, skin, f64::INFINITY);
    Image::new(img.mapv(|v| T::lit(v.clamp(0.0, 1.0)))).expect("three channels")
}

fn blend(img: &mut Array3<f64>, y: usize, x: usize, color: [f64; 3], shade: f64, coverage: f64) {
    for (c, &col) in color.iter().enumerate() {
        let v = &mut img[[c, y, x]];
        *v += coverage * (col * shade - *v);
    }
}

fn capsule(img: &mut Array3<f64>, a: (f64, f64), b: (f64, f64), r: f64, color: [f64; 3], stripe: f64) {
    let (_, h, w) = img.dim();
    let reach = r + 1.0;
    let x0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
    let x1 = ((a.0.max(b.0) + reach).ceil().max(0.0) as usize).min(w - 1);
    let y0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
    let y1 = ((a.1.max(b.1) + reach).ceil().max(0.0) as usize).min(h - 1);
    let len = (b.0 - a.0).hypot(b.1 - a.1).max(1e-9);
    let (ux, uy) = ((b.0 - a.0) / len, (b.1 - a.1) / len);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let p = (x as f64, y as f64);
            let d = segment_distance(p, a, b);
            let coverage = (r - d + 0.5).clamp(0.0, 1.0);
            if coverage > 0.0 {
                let along = (p.0 - a.0) * ux + (p.1 - a.1) * uy;
                let round = (1.0 - (d / r).min(1.0).powi(2)).sqrt();
                let shade = (0.7 + 0.3 * round) * (1.0 + 0.08 * (along / stripe).sin());
                blend(img, y, x, color, shade, coverage);
            }
        }
    }
}

/// Convex quad with anti-aliased edges; corners may be given in either winding.
fn quad(img: &mut Array3<f64>, corners: [(f64, f64); 4], color: [f64; 3], stripe: f64) {
    let (_, h, w) = img.dim();
    let area: f64 = (0..4)
        .map(|i| {
            let (p, q) = (corners[i], corners[(i + 1) % 4]);
            p.0 * q.1 - q.0 * p.1
        })
        .sum();
    let orient = area.signum();
    let xs = corners.iter().map(|c| c.0);
    let ys = corners.iter().map(|c| c.1);
    let x0 = (xs.clone().fold(f64::INFINITY, f64::min) - 1.0).floor().max(0.0) as usize;
    let x1 = ((xs.fold(f64::NEG_INFINITY, f64::max) + 1.0).ceil().max(0.0) as usize).min(w - 1);
    let y0 = (ys.clone().fold(f64::INFINITY, f64::min) - 1.0).floor().max(0.0) as usize;
    let y1 = ((ys.fold(f64::NEG_INFINITY, f64::max) + 1.0).ceil().max(0.0) as usize).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let p = (x as f64, y as f64);
            let inside = (0..4)
                .map(|i| {
                    let (a, b) = (corners[i], corners[(i + 1) % 4]);
                    let (ex, ey) = (b.0 - a.0, b.1 - a.1);
                    let len = ex.hypot(ey).max(1e-9);
                    orient * (ex * (p.1 - a.1) - ey * (p.0 - a.0)) / len
                })
                .fold(f64::INFINITY, f64::min);
            let coverage = (inside + 0.5).clamp(0.0, 1.0);
            if coverage > 0.0 {
                let shade = 0.85 * (1.0 + 0.08 * (p.1 / stripe).sin());
                blend(img, y, x, color, shade, coverage);
            }
        }
    }
}

/// `count` synthetic pairs; sample `i` draws from ChaCha8 stream `i` of `seed`.
///
/// Poses whose flow has a mean magnitude below `min_mean_magnitude` pixels are redrawn
/// from the same stream, so the result stays deterministic.
pub fn synth_dataset<T: Real>(count: usize, seed: u64, strength: f64, min_mean_magnitude: f64) -> Result<Vec<SamplePair<T>>> {
    (0..count)
        .map(|i| synth_sample(seed, i, strength, min_mean_magnitude).map(|(_, pair)| pair))
        .collect()
}

/// Sample `index` of [`synth_dataset`], together with the pose it was drawn from.
pub fn synth_sample<T: Real>(
    seed: u64,
    index: usize,
    strength: f64,
    min_mean_magnitude: f64,
) -> Result<(KeypointSet, SamplePair<T>)> {
    const MAX_DRAWS: usize = 64;
    let size = (INPUT_SIZE, INPUT_SIZE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    for _ in 0..MAX_DRAWS {
        let kp = random_pose(&mut rng, size);
        let image = render_figure::<T, _>(&kp, &mut rng, size);
        let mut pair = synth_pair(&image, &kp, strength, seed.wrapping_add(index as u64))?;
        let mean = pair.gt_flow.as_ref().map_or(0.0, |f| f.mean_magnitude().as_f64());
        if mean >= min_mean_magnitude {
            pair.id = format!("synth-{seed}-{index}");
            return Ok((kp, pair));
        }
    }
    Err(Error::Invalid(format!(
        "no pose reached a mean flow magnitude of {min_mean_magnitude} px in {MAX_DRAWS} draws"
    )))
}
