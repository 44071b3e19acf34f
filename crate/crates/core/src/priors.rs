//! Structural priors derived from a keypoint set: skeleton maps, part affinity
//! fields (Cartesian and polar), and bottleneck-resolution structure heatmaps.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::keypoints::{Joint, KeypointSet, LimbTopology};
use crate::resample::area_resize;
use crate::scalar::Real;

pub const DEFAULT_LINE_WIDTH: f64 = 3.0;
pub const DEFAULT_DILATE_ITERS: usize = 3;

/// `N_S × H × W` bone rasterizations in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonMaps<T> {
    pub data: Array3<T>,
}

impl<T: Real> SkeletonMaps<T> {
    pub fn size(&self) -> (usize, usize) {
        (self.data.dim().1, self.data.dim().2)
    }
}

/// Per-limb unit vector fields plus their polar decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct PafStack<T> {
    /// `N_L × H × W × 2`, each entry a unit vector or zero.
    pub vectors: Array4<T>,
    /// `N_L × H × W`, the vector norm.
    pub magnitude: Array3<T>,
    /// `N_L × H × W`, radians in `(-pi, pi]`; zero where the magnitude is zero.
    pub orientation: Array3<T>,
    pub warnings: Vec<String>,
}

impl<T: Real> PafStack<T> {
    pub fn empty(height: usize, width: usize) -> Self {
        Self::from_vectors(Array4::zeros((LimbTopology::NUM_PAFS, height, width, 2)))
    }

    /// Derives magnitude and orientation from the vector fields.
    pub fn from_vectors(vectors: Array4<T>) -> Self {
        let (n, h, w, _) = vectors.dim();
        let mut magnitude = Array3::zeros((n, h, w));
        let mut orientation = Array3::zeros((n, h, w));
        for c in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let vx = vectors[[c, y, x, 0]];
                    let vy = vectors[[c, y, x, 1]];
                    let m = vx.hypot(vy);
                    magnitude[[c, y, x]] = m;
                    if m > T::zero() {
                        orientation[[c, y, x]] = polar_angle(vx, vy);
                    }
                }
            }
        }
        PafStack {
            vectors,
            magnitude,
            orientation,
            warnings: Vec::new(),
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.magnitude.dim().1, self.magnitude.dim().2)
    }

    /// `2 × H × W` channel sum of all limb vectors.
    pub fn summed(&self) -> Array3<T> {
        let summed = self.vectors.sum_axis(Axis(0));
        summed.permuted_axes([2, 0, 1]).as_standard_layout().to_owned()
    }

    pub fn support(&self, limb: usize) -> Array2<bool> {
        self.magnitude.index_axis(Axis(0), limb).mapv(|m| m > T::zero())
    }
}

/// `atan2` folded into `(-pi, pi]`.
fn polar_angle<T: Real>(vx: T, vy: T) -> T {
    let a = vy.atan2(vx);
    if a <= -T::lit(std::f64::consts::PI) {
        T::lit(std::f64::consts::PI)
    } else {
        a
    }
}

/// `(M_arms, M_torso, M_legs, M_FG, M_BG)` at bottleneck resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureHeatmaps<T> {
    pub data: Array3<T>,
}

impl<T: Real> StructureHeatmaps<T> {
    pub const CHANNELS: usize = 5;
    pub const ARMS: usize = 0;
    pub const TORSO: usize = 1;
    pub const LEGS: usize = 2;
    pub const FOREGROUND: usize = 3;
    pub const BACKGROUND: usize = 4;

    pub fn size(&self) -> (usize, usize) {
        (self.data.dim().1, self.data.dim().2)
    }
}

/// Euclidean distance from `p` to segment `ab`, symmetric in the endpoint order.
pub fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    one_sided_distance(p, a, b).min(one_sided_distance(p, b, a))
}

fn one_sided_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let (px, py) = (p.0 - a.0, p.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        ((px * dx + py * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ex, ey) = (px - t * dx, py - t * dy);
    (ex * ex + ey * ey).sqrt()
}

fn endpoints(kp: &KeypointSet, (a, b): (usize, usize)) -> Option<(Joint, Joint)> {
    let (ja, jb) = (kp.joint(a), kp.joint(b));
    (ja.is_valid() && jb.is_valid()).then_some((ja, jb))
}

fn in_frame(kp: &KeypointSet, (h, w): (usize, usize)) -> KeypointSet {
    if (kp.height(), kp.width()) == (h, w) {
        kp.clone()
    } else {
        kp.rescaled(w, h)
    }
}

/// Rasterizes each skeleton edge as an anti-aliased line of the given width, peak value 1.
///
/// Keypoints are rescaled when their frame differs from `size`. Edges with a missing
/// endpoint leave their channel at zero.
pub fn rasterize_skeletons<T: Real>(
    kp: &KeypointSet,
    size: (usize, usize),
    line_width: f64,
) -> Result<SkeletonMaps<T>> {
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(Error::Invalid("skeleton map size must be positive".into()));
    }
    if !(line_width >= 1.0) {
        return Err(Error::Invalid(format!("line width {line_width} < 1")));
    }
    let kp = in_frame(kp, size);
    let reach = line_width / 2.0 + 0.5;
    let mut data = Array3::zeros((LimbTopology::NUM_SKELETONS, h, w));
    for (c, &edge) in LimbTopology::SKELETON_EDGES.iter().enumerate() {
        let Some((ja, jb)) = endpoints(&kp, edge) else { continue };
        let (a, b) = ((ja.x, ja.y), (jb.x, jb.y));
        let x0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
        let x1 = ((a.0.max(b.0) + reach).ceil().max(0.0) as usize).min(w - 1);
        let y0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
        let y1 = ((a.1.max(b.1) + reach).ceil().max(0.0) as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = segment_distance((x as f64, y as f64), a, b);
                let v = (reach - d).clamp(0.0, 1.0);
                if v > 0.0 {
                    data[[c, y, x]] = T::lit(v);
                }
            }
        }
    }
    Ok(SkeletonMaps { data })
}

/// Half-width of the PAF band around a limb axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HalfWidth {
    /// `max(4 px, 0.08 × limb length)`.
    Auto,
    Fixed(f64),
}

impl HalfWidth {
    pub fn resolve(self, limb_length: f64) -> f64 {
        match self {
            HalfWidth::Auto => (0.08 * limb_length).max(4.0),
            HalfWidth::Fixed(v) => v,
        }
    }
}

/// Pixels whose centers fall in the rectangle of half-width `half_width` around `a → b`.
pub fn limb_rectangle(size: (usize, usize), a: (f64, f64), b: (f64, f64), half_width: f64) -> Array2<bool> {
    let (h, w) = size;
    let len = (b.0 - a.0).hypot(b.1 - a.1);
    let (ux, uy) = ((b.0 - a.0) / len, (b.1 - a.1) / len);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (px, py) = (x as f64 - a.0, y as f64 - a.1);
        let along = px * ux + py * uy;
        let across = -px * uy + py * ux;
        along >= 0.0 && along <= len && across.abs() <= half_width
    })
}

/// One iteration of binary dilation with a 3×3 square structuring element.
pub fn dilate3x3(mask: ArrayView2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let ys = y.saturating_sub(1)..(y + 2).min(h);
        ys.into_iter()
            .any(|yy| (x.saturating_sub(1)..(x + 2).min(w)).any(|xx| mask[[yy, xx]]))
    })
}

/// Builds one unit-vector field per limb, dilated `dilate_iters` times.
pub fn build_pafs<T: Real>(
    kp: &KeypointSet,
    size: (usize, usize),
    half_width: HalfWidth,
    dilate_iters: usize,
) -> Result<PafStack<T>> {
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(Error::Invalid("PAF size must be positive".into()));
    }
    let kp = in_frame(kp, size);
    let mut vectors = Array4::zeros((LimbTopology::NUM_PAFS, h, w, 2));
    let mut warnings = Vec::new();
    for (c, &limb) in LimbTopology::PAF_LIMBS.iter().enumerate() {
        let Some((ja, jb)) = endpoints(&kp, limb) else { continue };
        let (a, b) = ((ja.x, ja.y), (jb.x, jb.y));
        let len = (b.0 - a.0).hypot(b.1 - a.1);
        if len < 1.0 {
            let msg = format!("limb {c} has coincident endpoints ({len:.3} px); channel left empty");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let mut mask = limb_rectangle(size, a, b, half_width.resolve(len));
        for _ in 0..dilate_iters {
            mask = dilate3x3(mask.view());
        }
        let (ux, uy) = (T::lit((b.0 - a.0) / len), T::lit((b.1 - a.1) / len));
        for ((y, x), &inside) in mask.indexed_iter() {
            if inside {
                vectors[[c, y, x, 0]] = ux;
                vectors[[c, y, x, 1]] = uy;
            }
        }
    }
    let mut stack = PafStack::from_vectors(vectors);
    stack.warnings = warnings;
    Ok(stack)
}

/// Groups limb supports into arms/torso/legs/foreground/background and area-averages them
/// down to the bottleneck resolution.
pub fn encode_structure<T: Real>(pafs: &PafStack<T>, bottleneck: (usize, usize)) -> StructureHeatmaps<T> {
    let (h, w) = pafs.size();
    let union = |limbs: &[usize]| -> Array2<T> {
        Array2::from_shape_fn((h, w), |(y, x)| {
            if limbs.iter().any(|&l| pafs.magnitude[[l, y, x]] > T::zero()) {
                T::one()
            } else {
                T::zero()
            }
        })
    };
    let all: Vec<usize> = (0..LimbTopology::NUM_PAFS).collect();
    let parts = [
        union(&LimbTopology::ARM_LIMBS),
        union(&LimbTopology::TORSO_LIMBS),
        union(&LimbTopology::LEG_LIMBS),
        union(&all),
    ];
    let (bh, bw) = bottleneck;
    let mut data = Array3::zeros((StructureHeatmaps::<T>::CHANNELS, bh, bw));
    for (c, mask) in parts.iter().enumerate() {
        data.slice_mut(s![c, .., ..]).assign(&area_resize(mask.view(), bh, bw));
    }
    let fg = data.slice(s![StructureHeatmaps::<T>::FOREGROUND, .., ..]).to_owned();
    data.slice_mut(s![StructureHeatmaps::<T>::BACKGROUND, .., ..])
        .assign(&fg.mapv(|v| T::one() - v));
    StructureHeatmaps { data }
}
