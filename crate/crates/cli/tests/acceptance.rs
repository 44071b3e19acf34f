//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Oracles here are written independently of the library code they check.
//! `BODYFLOW_BR5K_MANIFEST` enables the optional dataset baseline check;
//! `BODYFLOW_ACCEPT_WO_AFF=1` adds the w/o AFF variant to the ablation table.

mod common;

use std::time::{Duration, Instant};

use axum::http::StatusCode;
use bodyflow::data::{random_pose, render_figure, synth_dataset, synth_pair, INPUT_SIZE};
use bodyflow::flow::FlowField;
use bodyflow::generator::{AttentionMode, Generator, GeneratorConfig};
use bodyflow::imaging::{encode_png, load_image, BitDepth, Image};
use bodyflow::losses::{
    loss_flow, loss_flow_grad, loss_img, loss_img_grad, loss_orth, loss_orth_grad, loss_orth_summed, total_loss, LossParts,
    LossWeights,
};
use bodyflow::metrics::{epe, psnr, render_table, ssim, MetricReport};
use bodyflow::priors::{limb_rectangle, StructureHeatmaps};
use bodyflow::sasa::{self, center, compose, self_attention_map, structure_affinity_map, Affinity, SasaWeights};
use bodyflow::train::{evaluate, train, AblationTag, TrainConfig, TrainIo, TrainOutcome};
use bodyflow::warp::{upsample_flow, warp, warp_backward};
use bodyflow::{Generator32, SamplePair32};
use bodyflow_cli::service::{router, AppState, ServiceConfig};
use common::*;
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Suite {
    results: Vec<(String, bool)>,
    /// Substring filters from the command line; empty runs everything.
    filters: Vec<String>,
}

impl Suite {
    fn selected(&self, name: &str) -> bool {
        self.filters.is_empty() || self.filters.iter().any(|f| name.contains(f.as_str()))
    }

    fn run(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        if !self.selected(name) {
            return;
        }
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        let (ok, detail) = match r {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        println!("{} {name} ({secs:.1}s): {detail}", if ok { "PASS" } else { "FAIL" });
        self.results.push((name.to_string(), ok));
    }

    fn skip(&mut self, name: &str, why: &str) {
        println!("SKIP {name}: {why}");
    }
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand3(r: &mut ChaCha8Rng, shape: (usize, usize, usize), lo: f64, hi: f64) -> Array3<f64> {
    Array3::from_shape_fn(shape, |_| r.random_range(lo..hi))
}

fn rand2(r: &mut ChaCha8Rng, shape: (usize, usize), lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| r.random_range(lo..hi))
}

/// `max|a - b| / max|b|` over flattened values.
fn rel_err<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for (x, y) in a.into_iter().zip(b) {
        diff = diff.max((x - y).abs());
        scale = scale.max(y.abs());
    }
    diff / scale.max(1e-300)
}

/// `‖a - b‖ / max(‖a‖, ‖b‖, 1e-6)`; the floor keeps an identically zero gradient
/// (e.g. a bias a row softmax cancels) from comparing finite-difference noise to itself.
fn norm_rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / na.max(nb).max(1e-6)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------- identity

fn identity_suite() -> Outcome {
    let mut r = rng(1);
    for seed in 0..8u64 {
        let img = Image::new(rand3(&mut r, (3, 17 + seed as usize, 23), 0.0, 1.0)).unwrap();
        let flow = FlowField::new(rand3(&mut r, (2, 17 + seed as usize, 23), -9.0, 9.0)).unwrap();
        let out = warp(&img, &flow, 0.0).unwrap();
        let same = out.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("warp with mu=0 changed pixels (seed {seed})"));
        }
        let img32 = img.cast::<f32>();
        if warp(&img32, &flow.cast::<f32>(), 0.0).unwrap() != img32 {
            return Err("f32 warp with mu=0 changed pixels".into());
        }
    }

    let pair = &synth_dataset::<f32>(1, 3, 1.0, 0.0).unwrap()[0];
    for mode in [AttentionMode::Sasa, AttentionMode::SelfAttentionOnly, AttentionMode::None] {
        let g = Generator::<f32>::init(GeneratorConfig { attention_mode: mode, ..GeneratorConfig::tiny() }, 5).unwrap();
        let heat = bodyflow::train::heatmaps_for(pair, g.config());
        let f = g.forward(bodyflow::train::generator_input(pair, g.config(), &heat)).unwrap();
        if f.data().iter().any(|&v| v != 0.0) {
            return Err(format!("zero-initialized generator ({mode:?}) emitted a non-zero flow"));
        }
    }

    let (c, n) = (16, 12);
    let mut w = SasaWeights::<f64>::init(c, &mut r);
    w.key_bias.mapv_inplace(|_| 0.3);
    w.value_bias.mapv_inplace(|_| -0.2);
    w.gamma = 0.0;
    let x = rand2(&mut r, (c, n), -2.0, 2.0);
    let y = rand2(&mut r, (StructureHeatmaps::<f64>::CHANNELS, n), 0.0, 1.0);
    for aff in [Affinity::Structure(y.view()), Affinity::Disabled] {
        let (out, _) = sasa::apply(x.view(), aff, &w).unwrap();
        if out.iter().zip(x.iter()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err("attention with gamma=0 is not the identity".into());
        }
    }

    let mut worst = 0.0f64;
    for k in 0..8 {
        let m = rand2(&mut r, (20 + k, 20 + k), -50.0, 80.0);
        worst = worst.max(center(&m).mean().unwrap().abs());
    }
    check(
        worst < 1e-6,
        format!("warp(I,F,0)==I bitwise; zero-init flow == 0 in 3 modes; gamma=0 identity; |mean(center)| max {worst:.2e}"),
    )
}

// ---------------------------------------------------------------- oracles

fn oracle_sasa() -> (f64, String) {
    let mut r = rng(2);
    let (c, n) = (16, 16); // 4x4 bottleneck
    let cs = StructureHeatmaps::<f64>::CHANNELS;
    let mut w = SasaWeights::<f64>::init(c, &mut r);
    let ci = w.inner();
    w.key_bias = Array1::from_shape_fn(ci, |_| r.random_range(-0.5..0.5));
    w.query_bias = Array1::from_shape_fn(ci, |_| r.random_range(-0.5..0.5));
    w.value_bias = Array1::from_shape_fn(c, |_| r.random_range(-0.5..0.5));
    w.structure_bias = Array1::from_shape_fn(ci, |_| r.random_range(-0.5..0.5));
    w.gamma = 0.7;
    let x = rand2(&mut r, (c, n), -1.5, 1.5);
    let y = rand2(&mut r, (cs, n), 0.0, 1.0);

    let proj = |wm: &Array2<f64>, b: &Array1<f64>, v: &Array2<f64>, col: usize| -> Vec<f64> {
        (0..wm.nrows())
            .map(|o| b[o] + (0..wm.ncols()).map(|i| wm[[o, i]] * v[[i, col]]).sum::<f64>())
            .collect()
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let keys: Vec<Vec<f64>> = (0..n).map(|j| proj(&w.key_weight, &w.key_bias, &x, j)).collect();
    let queries: Vec<Vec<f64>> = (0..n).map(|j| proj(&w.query_weight, &w.query_bias, &x, j)).collect();
    let values: Vec<Vec<f64>> = (0..n).map(|j| proj(&w.value_weight, &w.value_bias, &x, j)).collect();
    let gs: Vec<Vec<f64>> = (0..n).map(|j| proj(&w.structure_weight, &w.structure_bias, &y, j)).collect();

    let mut att = vec![vec![0.0; n]; n];
    let mut aff = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            att[i][j] = dot(&keys[i], &queries[j]);
            aff[i][j] = dot(&gs[i], &gs[j]);
        }
    }
    let mean = |m: &Vec<Vec<f64>>| m.iter().flatten().sum::<f64>() / (n * n) as f64;
    let (ma, mf) = (mean(&att), mean(&aff));
    let mut phi = vec![vec![0.0; n]; n];
    let mut soft = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            phi[i][j] = sigmoid(att[i][j] - ma) * sigmoid(aff[i][j] - mf);
        }
        let z: f64 = (0..n).map(|j| att[i][j].exp()).sum();
        for j in 0..n {
            soft[i][j] = att[i][j].exp() / z;
        }
    }
    let out_of = |m: &Vec<Vec<f64>>| {
        Array2::from_shape_fn((c, n), |(ch, i)| x[[ch, i]] + w.gamma * (0..n).map(|j| m[i][j] * values[j][ch]).sum::<f64>())
    };
    let flat = |m: &Vec<Vec<f64>>| m.iter().flatten().copied().collect::<Vec<f64>>();

    let lib_att = self_attention_map(x.view(), &w);
    let lib_aff = structure_affinity_map(y.view(), &w);
    let lib_phi = compose(&lib_att, &lib_aff).unwrap();
    let (lib_out, _) = sasa::apply(x.view(), Affinity::Structure(y.view()), &w).unwrap();
    let (lib_soft_out, cache) = sasa::apply(x.view(), Affinity::Disabled, &w).unwrap();
    let errs = [
        rel_err(lib_att.iter(), flat(&att).iter()),
        rel_err(lib_aff.iter(), flat(&aff).iter()),
        rel_err(lib_phi.iter(), flat(&phi).iter()),
        rel_err(lib_out.iter(), out_of(&phi).iter()),
        rel_err(cache.map().iter(), flat(&soft).iter()),
        rel_err(lib_soft_out.iter(), out_of(&soft).iter()),
    ];
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    (worst, format!("sasa {worst:.1e}"))
}

fn oracle_ssim() -> (f64, String) {
    let mut r = rng(3);
    let a = Image::new(rand3(&mut r, (3, 16, 16), 0.0, 1.0)).unwrap();
    let mut bd = a.data().clone();
    bd.mapv_inplace(|v| (v + r.random_range(-0.2..0.2)).clamp(0.0, 1.0));
    let b = Image::new(bd).unwrap();
    // direct 2-D Gaussian window, no separable filtering
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let z: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..3 {
        let mut s = 0.0;
        for oy in 0..6 {
            for ox in 0..6 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wgt = g[i] * g[j] / z;
                        let (p, q) = (a.data()[[ch, oy + i, ox + j]], b.data()[[ch, oy + i, ox + j]]);
                        mx += wgt * p;
                        my += wgt * q;
                        sxx += wgt * p * p;
                        syy += wgt * q * q;
                        sxy += wgt * p * q;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                s += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        total += s / 36.0;
    }
    let oracle = total / 3.0;
    let e = (ssim(&a, &b).unwrap() - oracle).abs() / oracle.abs();
    (e, format!("ssim {e:.1e}"))
}

fn oracle_losses_and_epe() -> (f64, String) {
    let mut r = rng(4);
    let (h, w) = (13, 16);
    let pred = FlowField::new(rand3(&mut r, (2, h, w), -4.0, 4.0)).unwrap();
    let gt = FlowField::new(rand3(&mut r, (2, h, w), -4.0, 4.0)).unwrap();
    let out = Image::new(rand3(&mut r, (3, h, w), 0.0, 1.0)).unwrap();
    let tgt = Image::new(rand3(&mut r, (3, h, w), 0.0, 1.0)).unwrap();
    let mut dir = rand3(&mut r, (2, h, w), -1.0, 1.0);
    for y in 0..h {
        for x in 0..4 {
            dir[[0, y, x]] = 0.0;
            dir[[1, y, x]] = 0.0;
        }
    }
    let (p, g) = (pred.data(), gt.data());
    let mut e = 0.0;
    let mut lf = 0.0;
    let (mut lo, mut cnt) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (p[[0, y, x]] - g[[0, y, x]], p[[1, y, x]] - g[[1, y, x]]);
            e += (dx * dx + dy * dy).sqrt();
            lf += dx.abs() + dy.abs();
            let (fx, fy, vx, vy) = (p[[0, y, x]], p[[1, y, x]], dir[[0, y, x]], dir[[1, y, x]]);
            let (nf, nv) = ((fx * fx + fy * fy).sqrt(), (vx * vx + vy * vy).sqrt());
            if nf > 1e-6 && nv > 1e-6 {
                lo += ((fx * vx + fy * vy) / (nf * nv)).abs();
                cnt += 1;
            }
        }
    }
    let li: f64 = out.data().iter().zip(tgt.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / (3 * h * w) as f64;
    let pairs = [
        (epe(&pred, &gt).unwrap(), e / (h * w) as f64),
        (loss_flow(&pred, &gt).unwrap(), lf / (2 * h * w) as f64),
        (loss_img(&out, &tgt).unwrap(), li),
        (loss_orth_summed(&pred, dir.view()).unwrap().value, lo / cnt as f64),
    ];
    let worst = pairs.iter().map(|(a, b)| (a - b).abs() / b.abs()).fold(0.0, f64::max);
    (worst, format!("epe+losses {worst:.1e}"))
}

fn oracle_rectangles() -> (f64, String) {
    let mut r = rng(5);
    let mut mismatches = 0usize;
    let mut inside = 0usize;
    for _ in 0..40 {
        let a: (f64, f64) = (r.random_range(2.0..30.0), r.random_range(2.0..30.0));
        let b: (f64, f64) = (r.random_range(2.0..30.0), r.random_range(2.0..30.0));
        if (a.0 - b.0).hypot(a.1 - b.1) < 1.0 {
            continue;
        }
        let hw = r.random_range(0.5..5.0);
        let mask = limb_rectangle((32, 32), a, b, hw);
        // corners of the rectangle, then a convex-polygon half-plane test
        let len = (b.0 - a.0).hypot(b.1 - a.1);
        let (nx, ny) = (-(b.1 - a.1) / len * hw, (b.0 - a.0) / len * hw);
        let poly = [(a.0 + nx, a.1 + ny), (b.0 + nx, b.1 + ny), (b.0 - nx, b.1 - ny), (a.0 - nx, a.1 - ny)];
        for y in 0..32 {
            for x in 0..32 {
                let (px, py) = (x as f64, y as f64);
                let signs: Vec<f64> = (0..4)
                    .map(|k| {
                        let (p0, p1) = (poly[k], poly[(k + 1) % 4]);
                        (p1.0 - p0.0) * (py - p0.1) - (p1.1 - p0.1) * (px - p0.0)
                    })
                    .collect();
                let inn = signs.iter().all(|&s| s >= 0.0) || signs.iter().all(|&s| s <= 0.0);
                inside += inn as usize;
                mismatches += (inn != mask[[y, x]]) as usize;
            }
        }
    }
    (mismatches as f64, format!("rectangles {mismatches} mismatches of {inside} inside"))
}

fn oracle_suite() -> Outcome {
    let checks = [oracle_sasa(), oracle_ssim(), oracle_losses_and_epe(), oracle_rectangles()];
    let detail = checks.iter().map(|(_, d)| d.as_str()).collect::<Vec<_>>().join(", ");
    check(checks.iter().all(|(e, _)| *e < 1e-6), format!("relative error: {detail}"))
}

// ---------------------------------------------------------------- gradients

fn fd<F: Fn(&[f64]) -> f64>(x: &[f64], f: F) -> Vec<f64> {
    let step = 1e-6;
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = v[i];
            v[i] = orig + step;
            let up = f(&v);
            v[i] = orig - step;
            let down = f(&v);
            v[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

fn weight_fields(w: &mut SasaWeights<f64>) -> Vec<&mut [f64]> {
    vec![
        w.key_weight.as_slice_mut().unwrap(),
        w.key_bias.as_slice_mut().unwrap(),
        w.query_weight.as_slice_mut().unwrap(),
        w.query_bias.as_slice_mut().unwrap(),
        w.value_weight.as_slice_mut().unwrap(),
        w.value_bias.as_slice_mut().unwrap(),
        w.structure_weight.as_slice_mut().unwrap(),
        w.structure_bias.as_slice_mut().unwrap(),
        std::slice::from_mut(&mut w.gamma),
    ]
}

fn sasa_gradients(structure: bool) -> f64 {
    let mut r = rng(6 + structure as u64);
    let (c, n) = (8, 16);
    let mut w = SasaWeights::<f64>::init(c, &mut r);
    w.gamma = 0.8;
    w.key_bias.mapv_inplace(|_| 0.1);
    w.structure_bias.mapv_inplace(|_| -0.2);
    let x = rand2(&mut r, (c, n), -1.0, 1.0);
    let y = rand2(&mut r, (StructureHeatmaps::<f64>::CHANNELS, n), 0.0, 1.0);
    let d_out = rand2(&mut r, (c, n), -1.0, 1.0);
    let aff = || if structure { Affinity::Structure(y.view()) } else { Affinity::Disabled };
    let objective = |x: &Array2<f64>, w: &SasaWeights<f64>| (&sasa::apply(x.view(), aff(), w).unwrap().0 * &d_out).sum();

    let (_, cache) = sasa::apply(x.view(), aff(), &w).unwrap();
    let (dx, mut dw) = sasa::apply_backward(&cache, &w, d_out.view());
    let num_x = fd(x.as_slice().unwrap(), |v| {
        objective(&Array2::from_shape_vec((c, n), v.to_vec()).unwrap(), &w)
    });
    let mut worst = norm_rel(dx.as_slice().unwrap(), &num_x);
    let fields = if structure { 9 } else { 6 };
    for k in (0..fields).chain([8]) {
        let base = weight_fields(&mut w.clone())[k].to_vec();
        let num = fd(&base, |v| {
            let mut w2 = w.clone();
            weight_fields(&mut w2)[k].copy_from_slice(v);
            objective(&x, &w2)
        });
        worst = worst.max(norm_rel(weight_fields(&mut dw)[k], &num));
    }
    worst
}

fn gradient_suite() -> Outcome {
    let mut r = rng(8);
    let (h, w) = (16, 16);

    let sasa_err = sasa_gradients(true).max(sasa_gradients(false));

    // warp w.r.t. flow (and image) on a smooth image, flows away from integer crossings
    let img = Image::new(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        0.5 + 0.3 * ((x as f64 * 0.4 + c as f64).sin() * (y as f64 * 0.3).cos())
    }))
    .unwrap();
    let flow = FlowField::new(rand3(&mut r, (2, h, w), -3.0, 3.0)).unwrap();
    let d_out = rand3(&mut r, (3, h, w), -1.0, 1.0);
    let mu = 0.8;
    let grads = warp_backward(&img, &flow, mu, &d_out).unwrap();
    let num_flow = fd(flow.data().as_slice().unwrap(), |v| {
        let f = FlowField::new(Array3::from_shape_vec((2, h, w), v.to_vec()).unwrap()).unwrap();
        (warp(&img, &f, mu).unwrap().data() * &d_out).sum()
    });
    let num_img = fd(img.data().as_slice().unwrap(), |v| {
        let i = Image::new(Array3::from_shape_vec((3, h, w), v.to_vec()).unwrap()).unwrap();
        (warp(&i, &flow, mu).unwrap().data() * &d_out).sum()
    });
    let warp_err = norm_rel(grads.flow.data().as_slice().unwrap(), &num_flow)
        .max(norm_rel(grads.image.as_slice().unwrap(), &num_img));

    // losses
    let pred = FlowField::new(rand3(&mut r, (2, h, w), -3.0, 3.0)).unwrap();
    let gt = FlowField::new(rand3(&mut r, (2, h, w), -3.0, 3.0)).unwrap();
    let out = Image::new(rand3(&mut r, (3, h, w), 0.0, 1.0)).unwrap();
    let tgt = Image::new(rand3(&mut r, (3, h, w), 0.0, 1.0)).unwrap();
    let dir = rand3(&mut r, (2, h, w), -1.0, 1.0);
    let flow_of = |v: &[f64]| FlowField::new(Array3::from_shape_vec((2, h, w), v.to_vec()).unwrap()).unwrap();
    let e_flow = norm_rel(
        loss_flow_grad(&pred, &gt).unwrap().as_slice().unwrap(),
        &fd(pred.data().as_slice().unwrap(), |v| loss_flow(&flow_of(v), &gt).unwrap()),
    );
    let e_img = norm_rel(
        loss_img_grad(&out, &tgt).unwrap().as_slice().unwrap(),
        &fd(out.data().as_slice().unwrap(), |v| {
            loss_img(&Image::new(Array3::from_shape_vec((3, h, w), v.to_vec()).unwrap()).unwrap(), &tgt).unwrap()
        }),
    );
    let e_orth = norm_rel(
        loss_orth_grad(&pred, dir.view()).unwrap().as_slice().unwrap(),
        &fd(pred.data().as_slice().unwrap(), |v| loss_orth_summed(&flow_of(v), dir.view()).unwrap().value),
    );
    let loss_err = e_flow.max(e_img).max(e_orth);
    check(
        sasa_err < 1e-4 && loss_err < 1e-4 && warp_err < 1e-3,
        format!("relative error: sasa {sasa_err:.1e}, losses {loss_err:.1e} (< 1e-4); warp {warp_err:.1e} (< 1e-3)"),
    )
}

// ---------------------------------------------------------------- warp / upsample

fn warp_upsample_suite() -> Outcome {
    let up = upsample_flow(&FlowField::<f32>::constant(128, 128, 1.0, 0.0), (256, 256)).unwrap();
    let exact = up.dx().iter().all(|&v| v == 2.0) && up.dy().iter().all(|&v| v == 0.0);
    if !exact {
        return Err("constant (1,0) at 128 did not upsample to exactly (2,0) at 256".into());
    }
    let n = 64;
    let img = Image::new(Array3::from_shape_fn((3, n, n), |(c, y, x)| {
        let (u, v) = (x as f64 / n as f64, y as f64 / n as f64);
        0.5 + 0.25 * (std::f64::consts::TAU * (u + 0.3 * c as f64)).sin() * (std::f64::consts::TAU * v).cos()
    }))
    .unwrap();
    let flow = FlowField::new(Array3::from_shape_fn((2, n, n), |(k, y, x)| {
        let (u, v) = (x as f64 / n as f64, y as f64 / n as f64);
        if k == 0 {
            2.0 * (std::f64::consts::TAU * v).sin()
        } else {
            1.5 * (std::f64::consts::TAU * u).cos()
        }
    }))
    .unwrap();
    let low_then_up = warp(&img, &flow, 1.0).unwrap().resized(2 * n, 2 * n);
    let up_then_warp = warp(&img.resized(2 * n, 2 * n), &upsample_flow(&flow, (2 * n, 2 * n)).unwrap(), 1.0).unwrap();
    let diff = low_then_up
        .data()
        .iter()
        .zip(up_then_warp.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / low_then_up.data().len() as f64;
    check(diff < 2e-2, format!("(1,0)@128 -> (2,0)@256 exactly; commutation mean |diff| {diff:.2e} (< 2e-2)"))
}

// ---------------------------------------------------------------- training and ablation

struct Trained {
    train: Vec<SamplePair32>,
    val: Vec<SamplePair32>,
    config: TrainConfig,
    full: Option<(TrainOutcome, MetricReport)>,
}

fn training_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 1,
        max_steps: 2000,
        seed: 7,
        generator: GeneratorConfig::tiny(),
        augmentation: bodyflow::data::AugmentRanges::none(),
        validate_every: 100,
        ..TrainConfig::default()
    }
}

fn training_suite(state: &mut Trained) -> Outcome {
    let min_mag = state
        .val
        .iter()
        .map(|p| p.gt_flow.as_ref().unwrap().mean_magnitude() as f64)
        .fold(f64::INFINITY, f64::min);
    let g0 = Generator32::init(state.config.generator_config(), state.config.seed).unwrap();
    let initial = evaluate(&g0, &state.val).unwrap().epe.unwrap();
    let t = Instant::now();
    let outcome = train(&state.config, &state.train, &state.val, TrainIo::default()).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let report = evaluate(&outcome.checkpoint.generator::<f32>().unwrap(), &state.val).unwrap();
    let fin = report.epe.unwrap();
    let detail = format!(
        "{} pairs, {} steps, held-out min mean |F| {min_mag:.2} px, EPE {initial:.3} -> {fin:.3} px (< 1.0), {secs:.0}s (<= 1200s)",
        state.train.len(),
        outcome.log.len()
    );
    state.full = Some((outcome, report));
    check(
        fin < 1.0 && initial >= 3.0 && min_mag >= 3.0 && secs <= 1200.0 && state.train.len() >= 64,
        detail,
    )
}

fn ablation_suite(state: &Trained) -> Outcome {
    let (_, full) = state.full.as_ref().ok_or("needs the training run")?;
    let mut tags = vec![AblationTag::WoSp];
    if std::env::var("BODYFLOW_ACCEPT_WO_AFF").is_ok_and(|v| v == "1") {
        tags.push(AblationTag::WoAff);
    }
    let mut reports = vec![(AblationTag::Full, full.clone())];
    for tag in tags {
        let config = TrainConfig { ablation: tag, ..state.config.clone() };
        let out = train(&config, &state.train, &state.val, TrainIo::default()).map_err(|e| e.to_string())?;
        reports.push((tag, evaluate(&out.checkpoint.generator::<f32>().unwrap(), &state.val).unwrap()));
    }
    let rows: Vec<(String, &MetricReport)> = reports.iter().map(|(t, r)| (t.label().to_string(), r)).collect();
    let table = render_table(&rows);
    for line in table.lines() {
        println!("    {line}");
    }
    let epe_of = |tag| reports.iter().find(|(t, _)| *t == tag).unwrap().1.epe.unwrap();
    let (f, s) = (epe_of(AblationTag::Full), epe_of(AblationTag::WoSp));
    check(f <= s, format!("EPE full {f:.3} <= w/o SP {s:.3}"))
}

fn orth_and_weights_suite(state: &Trained) -> Outcome {
    let mut worst = 0.0f64;
    let mut count = 0;
    for p in state.train.iter().chain(&state.val) {
        worst = worst.max(loss_orth(p.gt_flow.as_ref().unwrap(), &p.pafs).unwrap().value as f64);
        count += 1;
    }
    let mut r = rng(9);
    for seed in 0..24u64 {
        let size = [(256, 256), (300, 200), (180, 320)][seed as usize % 3];
        let kp = random_pose(&mut r, size);
        let img = render_figure::<f32, _>(&kp, &mut r, size);
        let strength = [0.25, 0.5, 1.0][seed as usize % 3];
        let p = synth_pair(&img, &kp, strength, seed).unwrap();
        worst = worst.max(loss_orth(p.gt_flow.as_ref().unwrap(), &p.pafs).unwrap().value as f64);
        count += 1;
    }
    let w = LossWeights::default();
    let defaults = (w.lambda_img, w.lambda_flow, w.lambda_orth) == (15.0, 15.0, 2.0);
    let hand = [(0.5, 0.25, 0.125, 11.5), (1.0, 2.0, 4.0, 53.0), (0.0, 0.0, 3.0, 6.0)];
    let arithmetic = hand
        .iter()
        .all(|&(img, flow, orth, expect)| total_loss(LossParts { img, flow, orth }, &w) == expect);
    let odd = LossParts { img: 0.1, flow: 0.2, orth: 0.3 };
    let odd_ok = total_loss(odd, &w) == 15.0 * 0.1 + 15.0 * 0.2 + 2.0 * 0.3;
    check(
        worst < 0.05 && defaults && arithmetic && odd_ok,
        format!("max L_orth over {count} synthetic pairs {worst:.4} (< 0.05); lambda = (15,15,2) sums exact: {}", arithmetic && odd_ok),
    )
}

// ---------------------------------------------------------------- optional dataset baseline

fn br5k_baseline(manifest: &str) -> Outcome {
    let path = std::path::Path::new(manifest);
    let base = path.parent().unwrap_or(std::path::Path::new("."));
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let (mut s, mut p, mut n) = (0.0, 0.0, 0usize);
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if row["split"].as_str().unwrap_or("train") != "test" {
            continue;
        }
        let load = |k: &str| -> Result<Image<f64>, String> {
            let rel = row[k].as_str().ok_or(format!("row without {k}"))?;
            let (img, _) = load_image::<f64>(base.join(rel)).map_err(|e| e.to_string())?;
            Ok(img.to_rgb().resized(INPUT_SIZE, INPUT_SIZE))
        };
        let (src, tgt) = (load("source_path")?, load("target_path")?);
        s += ssim(&src, &tgt).map_err(|e| e.to_string())?;
        p += psnr(&src, &tgt).map_err(|e| e.to_string())?;
        n += 1;
    }
    if n == 0 {
        return Err("no test rows".into());
    }
    let (s, p) = (s / n as f64, p / n as f64);
    check(
        (s - 0.8339).abs() <= 0.02 && (p - 24.4916).abs() <= 0.5,
        format!("{n} test pairs: SSIM {s:.4} (0.8339 +/- 0.02), PSNR {p:.3} (24.4916 +/- 0.5)"),
    )
}

// ---------------------------------------------------------------- service

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

/// Bit-exactness and determinism checks on one 2K session; returns (create, re-warp) medians.
async fn service_session(app: &axum::Router, png: &[u8], kp_doc: &[u8]) -> Result<(Duration, Duration), String> {
    let (mut create, mut rewarp) = (Vec::new(), Vec::new());
    let mut ids = Vec::new();
    for _ in 0..3 {
        let t = Instant::now();
        let (id, _) = create_session(app, png, kp_doc).await;
        create.push(t.elapsed());
        ids.push(id);
    }
    let id = &ids[0];
    let (status, zero) = send(app, reshape_request(id, 0.0)).await;
    if status != StatusCode::OK {
        return Err(format!("reshape returned {status}"));
    }
    let original = png_pixels(png).to_rgb8();
    if png_pixels(&zero).to_rgb8() != original {
        return Err("mu=0 response differs from the upload".into());
    }
    let mut bodies = Vec::new();
    for _ in 0..3 {
        let t = Instant::now();
        let (_, b) = send(app, reshape_request(id, 0.5)).await;
        rewarp.push(t.elapsed());
        bodies.push(b);
    }
    if bodies.windows(2).any(|p| p[0] != p[1]) {
        return Err("repeated mu=0.5 responses differ".into());
    }
    if png_pixels(&bodies[0]).to_rgb8() == original {
        return Err("mu=0.5 response equals the original (zero flow)".into());
    }
    Ok((median(create), median(rewarp)))
}

/// Exactness on the trained checkpoint; the latency ratio on the default serving
/// architecture, since the tiny training net makes the full pipeline nearly free.
fn service_suite(trained: Generator32) -> Outcome {
    let (w, h) = (2048, 1536);
    let (img, kp) = figure(w, h, 31);
    let png = encode_png(&img, BitDepth::Eight).unwrap();
    let kp_doc = serde_json::to_vec(&kp.to_json()).unwrap();
    let serving = generator_with_live_head(GeneratorConfig::default());
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    rt.block_on(async {
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        let app = router(AppState::new(trained, "trained", ServiceConfig::default()));
        let (tc, tr) = service_session(&app, &png, &kp_doc).await?;
        let app = router(AppState::new(serving, "default-architecture", ServiceConfig::default()));
        let (c, r) = service_session(&app, &png, &kp_doc).await?;
        let ratio = r.as_secs_f64() / c.as_secs_f64();
        check(
            ratio < 0.25,
            format!(
                "{w}x{h}: mu=0 bit-exact, repeats byte-identical (trained and default nets); \
                 default net re-warp {:.0} ms / create {:.0} ms = {:.0}% (< 25%); tiny net {:.0} / {:.0} ms",
                ms(r),
                ms(c),
                ratio * 100.0,
                ms(tr),
                ms(tc)
            ),
        )
    })
}

fn main() {
    let filters = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut suite = Suite { results: Vec::new(), filters };
    suite.run("identity", identity_suite);
    suite.run("oracle-equivalence", oracle_suite);
    suite.run("gradients", gradient_suite);
    suite.run("warp-upsample", warp_upsample_suite);

    let mut state = Trained {
        train: synth_dataset(64, 1, 1.0, 3.0).unwrap(),
        val: synth_dataset(16, 2, 1.0, 3.0).unwrap(),
        config: training_config(),
        full: None,
    };
    suite.run("orth-and-loss-weights", || orth_and_weights_suite(&state));
    suite.run("desk-scale-training", || training_suite(&mut state));
    suite.run("ablation-trend", || ablation_suite(&state));

    match std::env::var("BODYFLOW_BR5K_MANIFEST") {
        Ok(m) => suite.run("br5k-baseline", || br5k_baseline(&m)),
        Err(_) => suite.skip("br5k-baseline", "set BODYFLOW_BR5K_MANIFEST to a manifest with `test` rows"),
    }

    let generator = match &state.full {
        Some((out, _)) => out.checkpoint.generator::<f32>().unwrap(),
        None => test_generator(),
    };
    suite.run("service-contract", || service_suite(generator));

    let failed: Vec<&str> = suite.results.iter().filter(|(_, ok)| !ok).map(|(n, _)| n.as_str()).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        suite.results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({})", failed.join(", ")) }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
