//! Dataset manifests, paired-sample loading, prior caching, augmentation and synthetic pairs.

mod augment;
mod synth;

pub use augment::{augment, AugmentParams, AugmentRanges, RelBox};
pub use synth::{random_pose, render_figure, synth_dataset, synth_sample, synth_flow, synth_pair, synth_pair_with, SynthProfile};

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, ArrayD, ArrayView2};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::flow::{read_flo, FlowField};
use crate::imaging::{load_image, Image};
use crate::keypoints::{ingest_keypoints, KeypointSet};
use crate::priors::{build_pafs, rasterize_skeletons, HalfWidth, PafStack, SkeletonMaps, DEFAULT_DILATE_ITERS, DEFAULT_LINE_WIDTH};
use crate::scalar::Real;
use crate::warp::resize_flow;

/// Side length every training sample is resized to.
pub const INPUT_SIZE: usize = 256;
pub const PRIOR_CACHE_VERSION: u32 = 1;
const INVERSION_ITERS: usize = 30;

/// One training example at `INPUT_SIZE × INPUT_SIZE`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair<T> {
    pub id: String,
    pub source: Image<T>,
    pub target: Image<T>,
    pub skeletons: SkeletonMaps<T>,
    pub pafs: PafStack<T>,
    /// Backward convention: `target(p) = source(p + F(p))`.
    pub gt_flow: Option<FlowField<T>>,
}

impl<T: Real> SamplePair<T> {
    pub fn size(&self) -> (usize, usize) {
        self.source.size()
    }

    pub fn cast<U: Real>(&self) -> SamplePair<U> {
        SamplePair {
            id: self.id.clone(),
            source: self.source.cast(),
            target: self.target.cast(),
            skeletons: SkeletonMaps {
                data: self.skeletons.data.mapv(|v| U::lit(v.as_f64())),
            },
            pafs: PafStack {
                warnings: self.pafs.warnings.clone(),
                ..PafStack::from_vectors(self.pafs.vectors.mapv(|v| U::lit(v.as_f64())))
            },
            gt_flow: self.gt_flow.as_ref().map(FlowField::cast),
        }
    }
}

/// Skeleton maps and PAFs with the default widths.
pub fn build_priors<T: Real>(kp: &KeypointSet, size: (usize, usize)) -> Result<(SkeletonMaps<T>, PafStack<T>)> {
    let skeletons = rasterize_skeletons(kp, size, DEFAULT_LINE_WIDTH)?;
    let pafs = build_pafs(kp, size, HalfWidth::Auto, DEFAULT_DILATE_ITERS)?;
    Ok((skeletons, pafs))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleDescriptor {
    pub id: String,
    pub source_path: PathBuf,
    pub target_path: Option<PathBuf>,
    pub keypoints_path: PathBuf,
    pub gt_flow_path: Option<PathBuf>,
    pub split: Split,
    /// The flow file maps source to target and must be inverted on import.
    pub gt_flow_forward: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRow {
    id: String,
    source_path: PathBuf,
    #[serde(default)]
    target_path: Option<PathBuf>,
    #[serde(default)]
    keypoints_path: Option<PathBuf>,
    #[serde(default)]
    gt_flow_path: Option<PathBuf>,
    #[serde(default)]
    split: Split,
    #[serde(default)]
    gt_flow_forward: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ManifestIssue {
    /// 1-based line number.
    pub line: usize,
    pub id: Option<String>,
    pub reason: String,
}

/// Valid descriptors in file order plus everything that was skipped.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Manifest {
    pub samples: Vec<SampleDescriptor>,
    pub issues: Vec<ManifestIssue>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleDescriptor> {
        self.samples.iter().filter(move |d| d.split == split)
    }
}

/// Reads a JSON-lines manifest. Relative paths resolve against the manifest's directory.
/// Rows that are malformed, duplicated or point at missing files are reported and skipped.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut manifest = Manifest::default();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut issue = |id: Option<&str>, reason: String| {
            log::warn!("manifest line {}: {reason}", i + 1);
            manifest.issues.push(ManifestIssue {
                line: i + 1,
                id: id.map(str::to_owned),
                reason,
            });
        };
        let row: ManifestRow = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                issue(None, format!("malformed record: {e}"));
                continue;
            }
        };
        let id = Some(row.id.as_str());
        let Some(kp) = row.keypoints_path else {
            issue(id, "missing keypoints_path".into());
            continue;
        };
        if !seen.insert(row.id.clone()) {
            issue(id, "duplicate id".into());
            continue;
        }
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        let desc = SampleDescriptor {
            id: row.id.clone(),
            source_path: resolve(row.source_path),
            target_path: row.target_path.map(resolve),
            keypoints_path: resolve(kp),
            gt_flow_path: row.gt_flow_path.map(resolve),
            split: row.split,
            gt_flow_forward: row.gt_flow_forward,
        };
        let files = [Some(&desc.source_path), desc.target_path.as_ref(), Some(&desc.keypoints_path), desc.gt_flow_path.as_ref()];
        if let Some(missing) = files.into_iter().flatten().find(|p| !p.is_file()) {
            issue(id, format!("missing file {}", missing.display()));
            continue;
        }
        manifest.samples.push(desc);
    }
    Ok(manifest)
}

/// Reads a Middlebury flow file into the backward convention, inverting it first when
/// the file holds a forward (source to target) flow.
pub fn import_gt_flow<T: Real>(path: impl AsRef<Path>, forward: bool) -> Result<FlowField<T>> {
    let flow = read_flo::<T>(path)?;
    Ok(if forward { invert_flow(&flow) } else { flow })
}

/// Fixed-point inversion `B(q) = -F(q + B(q))`, turning a forward flow into a backward one.
pub fn invert_flow<T: Real>(forward: &FlowField<T>) -> FlowField<T> {
    let (h, w) = forward.size();
    let f = forward.data().mapv(|v| v.as_f64());
    let mut b = f.mapv(|v| -v);
    for _ in 0..INVERSION_ITERS {
        let mut next = Array3::zeros((2, h, w));
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (x as f64 + b[[0, y, x]], y as f64 + b[[1, y, x]]);
                for c in 0..2 {
                    next[[c, y, x]] = -sample_clamped(f.slice(s![c, .., ..]), sx, sy);
                }
            }
        }
        b = next;
    }
    FlowField::new(b.mapv(T::lit)).expect("two channels")
}

pub(crate) fn sample_clamped(plane: ArrayView2<f64>, x: f64, y: f64) -> f64 {
    let (h, w) = plane.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (a, b) = (x - x0 as f64, y - y0 as f64);
    let top = plane[[y0, x0]] + a * (plane[[y0, x1]] - plane[[y0, x0]]);
    let bot = plane[[y1, x0]] + a * (plane[[y1, x1]] - plane[[y1, x0]]);
    top + b * (bot - top)
}

/// Integer crop window `(x, y, w, h)` covering the keypoint crop box, clipped to the image.
fn crop_window(kp: &KeypointSet) -> Option<(usize, usize, usize, usize)> {
    let c = kp.crop_box()?;
    let x0 = c.x.floor().max(0.0) as usize;
    let y0 = c.y.floor().max(0.0) as usize;
    let x1 = ((c.x + c.w).ceil() as usize).min(kp.width());
    let y1 = ((c.y + c.h).ceil() as usize).min(kp.height());
    (x1 > x0 && y1 > y0).then_some((x0, y0, x1 - x0, y1 - y0))
}

fn prepare_image<T: Real>(image: Image<T>, window: Option<(usize, usize, usize, usize)>) -> Result<Image<T>> {
    let image = match window {
        Some((x, y, w, h)) => image.crop(x, y, w, h)?,
        None => image,
    };
    Ok(image.to_rgb().resized(INPUT_SIZE, INPUT_SIZE))
}

/// Loads one manifest sample: crop box first, then a direct resize to `INPUT_SIZE`.
pub fn load_pair<T: Real>(desc: &SampleDescriptor) -> Result<SamplePair<T>> {
    let (source, _) = load_image::<T>(&desc.source_path)?;
    let (ih, iw) = source.size();
    let doc = std::fs::read(&desc.keypoints_path).map_err(|e| Error::io(&desc.keypoints_path, e))?;
    let mut kp = ingest_keypoints(&doc)?;
    if (kp.height(), kp.width()) != (ih, iw) {
        log::warn!(
            "{}: keypoints declare {}x{} but the image is {iw}x{ih}; rescaling",
            desc.id,
            kp.width(),
            kp.height()
        );
        let crop = kp.crop_box();
        kp = kp.rescaled(iw, ih).with_crop_box(crop)?;
    }
    let window = crop_window(&kp);
    let kp_local = match window {
        Some((x, y, w, h)) => kp.cropped(x as f64, y as f64, w, h),
        None => kp.clone(),
    };
    let kp256 = kp_local.rescaled(INPUT_SIZE, INPUT_SIZE);

    let source = prepare_image(source, window)?;
    let target = match &desc.target_path {
        Some(p) => {
            let (t, _) = load_image::<T>(p)?;
            if t.size() != (ih, iw) {
                return Err(Error::Invalid(format!("{}: target is {:?}, source is {:?}", desc.id, t.size(), (ih, iw))));
            }
            prepare_image(t, window)?
        }
        None => return Err(Error::Invalid(format!("sample {} has no target image", desc.id))),
    };
    let gt_flow = match &desc.gt_flow_path {
        Some(p) => {
            let f = import_gt_flow::<T>(p, desc.gt_flow_forward)?;
            if f.size() != (ih, iw) {
                return Err(Error::Invalid(format!("{}: flow is {:?}, source is {:?}", desc.id, f.size(), (ih, iw))));
            }
            let f = match window {
                Some((x, y, w, h)) => FlowField::new(f.data().slice(s![.., y..y + h, x..x + w]).to_owned())?,
                None => f,
            };
            Some(resize_flow(&f, (INPUT_SIZE, INPUT_SIZE))?)
        }
        None => None,
    };
    let (skeletons, pafs) = build_priors(&kp256, (INPUT_SIZE, INPUT_SIZE))?;
    Ok(SamplePair {
        id: desc.id.clone(),
        source,
        target,
        skeletons,
        pafs,
        gt_flow,
    })
}

/// Cache key: format version plus a checksum over every input file's bytes.
pub fn fingerprint(desc: &SampleDescriptor) -> Result<String> {
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&PRIOR_CACHE_VERSION.to_le_bytes());
    hasher.update(&[desc.gt_flow_forward as u8]);
    for p in [Some(&desc.source_path), desc.target_path.as_ref(), Some(&desc.keypoints_path), desc.gt_flow_path.as_ref()] {
        match p {
            Some(p) => {
                let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                hasher.update(&(bytes.len() as u64).to_le_bytes());
                hasher.update(&bytes);
            }
            None => hasher.update(&[0xff]),
        }
    }
    Ok(format!("v{PRIOR_CACHE_VERSION}-{:08x}", hasher.finalize()))
}

fn dyn_of<D: ndarray::Dimension>(a: &ndarray::Array<f32, D>) -> ArrayD<f32> {
    a.view().into_dyn().to_owned()
}

pub fn save_cached_pair(pair: &SamplePair<f32>, key: &str, path: impl AsRef<Path>) -> Result<()> {
    let mut c = Container::new(
        "sample_pair",
        json!({
            "id": pair.id,
            "key": key,
            "cache_version": PRIOR_CACHE_VERSION,
            "paf_warnings": pair.pafs.warnings,
        }),
    );
    c.insert("source", dyn_of(pair.source.data()));
    c.insert("target", dyn_of(pair.target.data()));
    c.insert("skeletons", dyn_of(&pair.skeletons.data));
    c.insert("paf_vectors", dyn_of(&pair.pafs.vectors));
    if let Some(f) = &pair.gt_flow {
        c.insert("gt_flow", dyn_of(f.data()));
    }
    c.write(path)
}

/// Returns `None` when the cache file was built from different inputs or another version.
pub fn load_cached_pair(path: impl AsRef<Path>, key: &str) -> Result<Option<SamplePair<f32>>> {
    let mut c = Container::read(path)?;
    if c.kind != "sample_pair" || c.meta.get("key").and_then(|k| k.as_str()) != Some(key) {
        return Ok(None);
    }
    let id = c.meta["id"].as_str().unwrap_or_default().to_owned();
    let warnings = serde_json::from_value(c.meta["paf_warnings"].clone()).unwrap_or_default();
    let dim3 = |a: ArrayD<f32>| a.into_dimensionality::<ndarray::Ix3>().map_err(|e| Error::Corrupt(e.to_string()));
    let source = Image::new(dim3(c.take("source")?)?)?;
    let target = Image::new(dim3(c.take("target")?)?)?;
    let skeletons = SkeletonMaps {
        data: dim3(c.take("skeletons")?)?,
    };
    let vectors = c
        .take("paf_vectors")?
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|e| Error::Corrupt(e.to_string()))?;
    let pafs = PafStack {
        warnings,
        ..PafStack::from_vectors(vectors)
    };
    let gt_flow = match c.tensors.contains_key("gt_flow") {
        true => Some(FlowField::new(dim3(c.take("gt_flow")?)?)?),
        false => None,
    };
    Ok(Some(SamplePair {
        id,
        source,
        target,
        skeletons,
        pafs,
        gt_flow,
    }))
}

/// Loads through a cache directory, rebuilding the entry when it is missing or stale.
pub fn load_pair_cached(desc: &SampleDescriptor, cache_dir: impl AsRef<Path>) -> Result<SamplePair<f32>> {
    let key = fingerprint(desc)?;
    let file: String = desc
        .id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    let path = cache_dir.as_ref().join(format!("{file}.bfc"));
    if path.is_file() {
        match load_cached_pair(&path, &key) {
            Ok(Some(pair)) => return Ok(pair),
            Ok(None) => log::info!("{}: cache is stale, rebuilding", desc.id),
            Err(e) => log::warn!("{}: unreadable cache ({e}), rebuilding", desc.id),
        }
    }
    let pair = load_pair::<f32>(desc)?;
    std::fs::create_dir_all(cache_dir.as_ref()).map_err(|e| Error::io(cache_dir.as_ref(), e))?;
    save_cached_pair(&pair, &key, &path)?;
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::write_flo;
    use crate::imaging::{save_png, BitDepth};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn write_sample(dir: &Path, name: &str, flow: bool) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
        let kp = random_pose(&mut rng, (96, 80));
        let img = render_figure::<f32, _>(&kp, &mut rng, (96, 80));
        save_png(&img, dir.join(format!("{name}.png")), BitDepth::Eight).unwrap();
        save_png(&img, dir.join(format!("{name}_t.png")), BitDepth::Eight).unwrap();
        std::fs::write(dir.join(format!("{name}.json")), serde_json::to_vec(&kp.to_json()).unwrap()).unwrap();
        let mut row = json!({
            "id": name,
            "source_path": format!("{name}.png"),
            "target_path": format!("{name}_t.png"),
            "keypoints_path": format!("{name}.json"),
        });
        if flow {
            write_flo(&FlowField::<f32>::constant(96, 80, 1.0, 2.0), dir.join(format!("{name}.flo"))).unwrap();
            row["gt_flow_path"] = json!(format!("{name}.flo"));
            row["split"] = json!("test");
        }
        row.to_string()
    }

    #[test]
    fn empty_manifest_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "").unwrap();
        assert_eq!(load_manifest(&p).unwrap(), Manifest::default());
        assert!(load_manifest(dir.path().join("absent.jsonl")).is_err());
    }

    #[test]
    fn manifest_reports_and_skips_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let good = write_sample(dir.path(), "a", true);
        let rows = [
            good.clone(),
            r#"{"id": "nokp", "source_path": "a.png"}"#.to_string(),
            r#"{"id": "gone", "source_path": "zzz.png", "keypoints_path": "a.json"}"#.to_string(),
            "not json".to_string(),
            good,
        ];
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, rows.join("\n")).unwrap();
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.samples.len(), 1);
        assert_eq!(m.samples[0].split, Split::Test);
        let lines: Vec<usize> = m.issues.iter().map(|i| i.line).collect();
        assert_eq!(lines, vec![2, 3, 4, 5]);
        assert!(m.issues[0].reason.contains("keypoints"));
    }

    #[test]
    fn manifest_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let names: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let rows: Vec<String> = names.iter().map(|n| write_sample(dir.path(), n, false)).collect();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, rows.join("\n")).unwrap();
        let m = load_manifest(&p).unwrap();
        assert!(m.issues.is_empty());
        assert_eq!(m.samples.iter().map(|d| d.id.clone()).collect::<Vec<_>>(), names);
    }

    #[test]
    fn loaded_pairs_are_resized_and_cached_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let row = write_sample(dir.path(), "a", true);
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, row).unwrap();
        let desc = load_manifest(&p).unwrap().samples.remove(0);
        let pair = load_pair::<f32>(&desc).unwrap();
        assert_eq!(pair.size(), (INPUT_SIZE, INPUT_SIZE));
        let flow = pair.gt_flow.as_ref().unwrap();
        // 80 -> 256 horizontally, 96 -> 256 vertically
        assert!((flow.at(10, 10).0 - 3.2).abs() < 1e-5);
        assert!((flow.at(10, 10).1 - 2.0 * 256.0 / 96.0).abs() < 1e-5);

        let cache = dir.path().join("cache");
        let first = load_pair_cached(&desc, &cache).unwrap();
        let second = load_pair_cached(&desc, &cache).unwrap();
        assert_eq!(first, pair);
        assert_eq!(second, pair);
        // a changed input invalidates the entry
        let key = fingerprint(&desc).unwrap();
        std::fs::write(&desc.keypoints_path, b"{}").unwrap();
        assert_ne!(fingerprint(&desc).unwrap(), key);
        assert!(load_cached_pair(cache.join("a.bfc"), "other").unwrap().is_none());
    }

    #[test]
    fn forward_flow_inversion() {
        let f = FlowField::<f64>::constant(16, 16, 1.5, -2.0);
        assert_eq!(invert_flow(&f), FlowField::constant(16, 16, -1.5, 2.0));
        // smooth field: B(q) + F(q + B(q)) = 0
        let f = FlowField::new(Array3::from_shape_fn((2, 32, 32), |(c, y, x)| {
            let t = (x as f64 * 0.2 + y as f64 * 0.1).sin();
            if c == 0 { 1.5 * t } else { -t }
        }))
        .unwrap();
        let b = invert_flow(&f);
        let fd = f.data();
        for y in 4..28 {
            for x in 4..28 {
                let (bx, by) = b.at(y, x);
                for c in 0..2 {
                    let fv = sample_clamped(fd.slice(s![c, .., ..]), x as f64 + bx, y as f64 + by);
                    let bv = if c == 0 { bx } else { by };
                    assert!((bv + fv).abs() < 1e-6);
                }
            }
        }
    }
}
