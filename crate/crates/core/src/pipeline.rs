//! Full-resolution inference: priors and generator at 256², flow back at the original size.

use std::time::{Duration, Instant};

use ndarray::s;
use serde::Serialize;

use crate::data::{build_priors, INPUT_SIZE};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::generator::Generator;
use crate::imaging::{Image, Raster};
use crate::keypoints::KeypointSet;
use crate::scalar::Real;
use crate::train::{generator_input, heatmaps_for};
use crate::warp::{resize_flow, warp, warp_window, MultiplierMu};
use crate::data::SamplePair;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub priors: Duration,
    pub forward: Duration,
    pub upsample: Duration,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FlowStats {
    pub width: usize,
    pub height: usize,
    pub mean_magnitude: f64,
    pub max_magnitude: f64,
}

impl FlowStats {
    pub fn of<T: Real>(flow: &FlowField<T>) -> Self {
        FlowStats {
            width: flow.width(),
            height: flow.height(),
            mean_magnitude: flow.mean_magnitude().as_f64(),
            max_magnitude: flow.max_magnitude().as_f64(),
        }
    }
}

/// Flow predicted for one photo.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    /// At the original image resolution; zero outside the crop box.
    pub flow: FlowField<T>,
    /// The generator's 256² output.
    pub low_res: FlowField<T>,
    /// Pixel window `(x, y, w, h)` the generator saw.
    pub window: (usize, usize, usize, usize),
    pub timings: StageTimings,
}

fn window_of(kp: &KeypointSet) -> (usize, usize, usize, usize) {
    let (w, h) = (kp.width(), kp.height());
    let Some(c) = kp.crop_box() else {
        return (0, 0, w, h);
    };
    let x0 = (c.x.floor().max(0.0) as usize).min(w - 1);
    let y0 = (c.y.floor().max(0.0) as usize).min(h - 1);
    let x1 = ((c.x + c.w).ceil() as usize).clamp(x0 + 1, w);
    let y1 = ((c.y + c.h).ceil() as usize).clamp(y0 + 1, h);
    (x0, y0, x1 - x0, y1 - y0)
}

/// Runs priors and the generator on the (cropped) photo and lifts the flow to full resolution.
pub fn predict_flow<T: Real>(generator: &Generator<T>, image: &Image<T>, keypoints: &KeypointSet) -> Result<Prediction<T>> {
    let (ih, iw) = image.size();
    let kp = if (keypoints.height(), keypoints.width()) != (ih, iw) {
        log::warn!(
            "keypoints declare {}x{} but the image is {iw}x{ih}; rescaling",
            keypoints.width(),
            keypoints.height()
        );
        keypoints.rescaled(iw, ih)
    } else {
        keypoints.clone()
    };
    if !kp.any_valid() {
        return Err(Error::Invalid("no keypoint passes the confidence threshold".into()));
    }
    let window = window_of(&kp);
    let (x, y, w, h) = window;

    let t0 = Instant::now();
    let crop = if window == (0, 0, iw, ih) { image.to_rgb() } else { image.crop(x, y, w, h)?.to_rgb() };
    let small = crop.resized(INPUT_SIZE, INPUT_SIZE);
    let kp_small = kp.cropped(x as f64, y as f64, w, h).rescaled(INPUT_SIZE, INPUT_SIZE);
    let (skeletons, pafs) = build_priors::<T>(&kp_small, (INPUT_SIZE, INPUT_SIZE))?;
    let pair = SamplePair {
        id: String::new(),
        source: small,
        target: Image::filled(3, 1, 1, T::zero()),
        skeletons,
        pafs,
        gt_flow: None,
    };
    let cfg = generator.config();
    let heat = heatmaps_for(&pair, cfg);
    let t1 = Instant::now();
    let low_res = generator.forward(generator_input(&pair, cfg, &heat))?;
    let t2 = Instant::now();
    let lifted = resize_flow(&low_res, (h, w))?;
    let flow = if window == (0, 0, iw, ih) {
        lifted
    } else {
        let mut full = FlowField::zeros(ih, iw);
        full.data_mut().slice_mut(s![.., y..y + h, x..x + w]).assign(lifted.data());
        full
    };
    let t3 = Instant::now();
    if !flow.is_finite() {
        return Err(Error::Numeric {
            what: "predicted flow".into(),
            location: format!("image {}", kp.image_name()),
        });
    }
    Ok(Prediction {
        flow,
        low_res,
        window,
        timings: StageTimings {
            priors: t1 - t0,
            forward: t2 - t1,
            upsample: t3 - t2,
        },
    })
}

/// Warps the original photo with a cached full-resolution flow.
pub fn reshape_with<T: Real>(image: &Image<T>, flow: &FlowField<T>, mu: MultiplierMu) -> Result<Image<T>> {
    warp(image, flow, T::lit(mu.value()))
}

/// Re-warps into a copy of `base`, the quantized original, touching only `window`.
///
/// Matches quantizing [`reshape_with`] as long as the flow is zero outside the window,
/// which holds for every [`Prediction`].
pub fn reshape_raster<T: Real>(
    base: &Raster,
    image: &Image<T>,
    flow: &FlowField<T>,
    window: (usize, usize, usize, usize),
    mu: MultiplierMu,
) -> Result<Raster> {
    // row bands keep the float intermediate cache-sized
    const BAND: usize = 32;
    let (x, y, w, h) = window;
    let mut out = base.clone();
    for y0 in (y..y + h).step_by(BAND) {
        let rows = BAND.min(y + h - y0);
        let patch = warp_window(image, flow, T::lit(mu.value()), (x, y0, w, rows))?;
        out.paste(x, y0, patch.view());
    }
    Ok(out)
}

/// Predict then warp, logging stage timings.
pub fn reshape<T: Real>(
    generator: &Generator<T>,
    image: &Image<T>,
    keypoints: &KeypointSet,
    mu: MultiplierMu,
) -> Result<(Image<T>, Prediction<T>)> {
    let prediction = predict_flow(generator, image, keypoints)?;
    let t = Instant::now();
    let out = reshape_with(image, &prediction.flow, mu)?;
    let tm = prediction.timings;
    log::info!(
        "reshape {}x{}: priors {:.3}s, forward {:.3}s, upsample {:.3}s, warp {:.3}s",
        image.width(),
        image.height(),
        tm.priors.as_secs_f64(),
        tm.forward.as_secs_f64(),
        tm.upsample.as_secs_f64(),
        t.elapsed().as_secs_f64()
    );
    Ok((out, prediction))
}
