use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use bodyflow::data::{
    build_priors, load_manifest, load_pair, load_pair_cached, synth_dataset, synth_pair, synth_sample, Split,
};
use bodyflow::flow::{read_flo, write_flo, FlowField};
use bodyflow::generator::GeneratorConfig;
use bodyflow::imaging::{load_image, save_png, BitDepth, Image};
use bodyflow::keypoints::ingest_keypoints;
use bodyflow::metrics::{epe, psnr, render_table, ssim, MetricReport, SampleMetrics};
use bodyflow::pipeline::reshape;
use bodyflow::train::{
    evaluate, inspect_checkpoint, run_ablation_suite, train, AblationTag, TrainConfig, TrainIo,
};
use bodyflow::warp::{visualize_flow, MultiplierMu};
use bodyflow::{FlowField32, SamplePair32};
use bodyflow_cli::service::{serve, AppState, ServiceConfig, DEFAULT_CAPACITY};
use bodyflow_cli::{load_generator, CHECKPOINT_ENV};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bodyflow", version, about = "Structure-aware flow body reshaping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reshape one photo and write the result as PNG.
    Reshape(ReshapeArgs),
    /// Run the local HTTP service.
    Serve(ServeArgs),
    /// Render skeleton maps and PAF visualizations for a keypoint file.
    Priors(PriorsArgs),
    /// Make synthetic training pairs, from a photo or from drawn figures.
    Synth(SynthArgs),
    /// Train a generator (or the three ablation variants).
    Train(TrainArgs),
    /// Compute SSIM/PSNR/EPE for directories or for a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Print the tensors and metadata stored in a checkpoint.
    Inspect { checkpoint: PathBuf },
}

#[derive(Args)]
struct CheckpointArg {
    #[arg(long, env = CHECKPOINT_ENV)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct ReshapeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    keypoints: PathBuf,
    #[command(flatten)]
    ckpt: CheckpointArg,
    /// Reshaping strength; negative values reverse the direction.
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    mu: f64,
    #[arg(long)]
    output: PathBuf,
    /// Also write the full-resolution flow (Middlebury .flo).
    #[arg(long)]
    flow_out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    ckpt: CheckpointArg,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// Sessions kept in memory.
    #[arg(long, default_value_t = DEFAULT_CAPACITY)]
    capacity: usize,
    /// Concurrent generator passes.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct PriorsArgs {
    #[arg(long)]
    keypoints: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Render at NxN instead of the keypoints' own frame.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Deform this photo; needs --keypoints. Without it, figures are drawn.
    #[arg(long, requires = "keypoints")]
    image: Option<PathBuf>,
    #[arg(long)]
    keypoints: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    strength: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of drawn pairs.
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// How many of the drawn pairs go to the val split.
    #[arg(long, default_value_t = 0)]
    val_count: usize,
    /// Redraw poses whose mean flow magnitude is below this (px).
    #[arg(long, default_value_t = 0.0)]
    min_magnitude: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON training configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSONL manifest; `train` rows train, `val` rows validate.
    #[arg(long, conflicts_with = "synthetic")]
    manifest: Option<PathBuf>,
    /// Cache decoded pairs here.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Train on this many in-memory synthetic pairs instead of a manifest.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 16)]
    val_synthetic: usize,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ablation: Option<AblationTag>,
    /// Use the small desk-scale generator.
    #[arg(long)]
    tiny: bool,
    /// Train full, wo_aff and wo_sp under one budget and write the comparison table.
    #[arg(long)]
    ablation_suite: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted images (and optional .flo flows).
    #[arg(long, requires = "gt_dir")]
    pred_dir: Option<PathBuf>,
    #[arg(long)]
    gt_dir: Option<PathBuf>,
    #[arg(long, conflicts_with = "pred_dir")]
    manifest: Option<PathBuf>,
    #[arg(long, env = CHECKPOINT_ENV)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Write the reports as JSON too.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Reshape(a) => cmd_reshape(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Priors(a) => cmd_priors(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect { checkpoint } => cmd_inspect(&checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn read_keypoints(path: &Path) -> Result<bodyflow::keypoints::KeypointSet> {
    let doc = std::fs::read(path).with_context(|| format!("ingest: reading {}", path.display()))?;
    ingest_keypoints(&doc).with_context(|| format!("ingest: keypoints {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_reshape(a: ReshapeArgs) -> Result<()> {
    let mu = MultiplierMu::lenient(a.mu).context("arguments")?;
    let (image, depth) = load_image::<f32>(&a.input).with_context(|| format!("ingest: image {}", a.input.display()))?;
    let kp = read_keypoints(&a.keypoints)?;
    let (generator, id) = load_generator(&a.ckpt.checkpoint)
        .with_context(|| format!("checkpoint: {}", a.ckpt.checkpoint.display()))?;
    let t = Instant::now();
    let (out, prediction) = reshape(&generator, &image, &kp, mu).context("inference")?;
    log::info!(
        "{}x{} reshaped with {id} in {:.2}s",
        image.width(),
        image.height(),
        t.elapsed().as_secs_f64()
    );
    save_png(&out, &a.output, depth).with_context(|| format!("write: {}", a.output.display()))?;
    if let Some(p) = &a.flow_out {
        write_flo(&prediction.flow, p).with_context(|| format!("write: {}", p.display()))?;
    }
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let (generator, id) = load_generator(&a.ckpt.checkpoint)
        .with_context(|| format!("checkpoint: {}", a.ckpt.checkpoint.display()))?;
    let state = AppState::new(
        generator,
        id.clone(),
        ServiceConfig {
            capacity: a.capacity,
            workers: a.workers,
        },
    );
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .with_context(|| format!("binding {}", a.addr))?;
        log::info!("serving {id} on http://{}", listener.local_addr()?);
        serve(listener, state).await.context("serve")
    })
}

fn cmd_priors(a: PriorsArgs) -> Result<()> {
    let mut kp = read_keypoints(&a.keypoints)?;
    if let Some(n) = a.size {
        kp = kp.rescaled(n, n);
    }
    let (skel, pafs) = build_priors::<f32>(&kp, (kp.height(), kp.width())).context("priors")?;
    for w in &pafs.warnings {
        log::warn!("{w}");
    }
    create_dir(&a.out_dir)?;
    for (i, plane) in skel.data.outer_iter().enumerate() {
        let (h, w) = plane.dim();
        let img = Image::new(plane.to_owned().into_shape_with_order((1, h, w))?)?;
        save_png(&img, a.out_dir.join(format!("skeleton_{i:02}.png")), BitDepth::Eight)?;
    }
    for (i, limb) in pafs.vectors.outer_iter().enumerate() {
        let flow = FlowField::new(limb.permuted_axes([2, 0, 1]).to_owned())?;
        save_png(&visualize_flow(&flow), a.out_dir.join(format!("paf_{i:02}.png")), BitDepth::Eight)?;
    }
    println!(
        "wrote {} skeleton maps and {} PAF visualizations to {}",
        skel.data.dim().0,
        pafs.vectors.dim().0,
        a.out_dir.display()
    );
    Ok(())
}

fn write_pair(dir: &Path, stem: &str, pair: &SamplePair32, kp_json: &serde_json::Value) -> Result<serde_json::Value> {
    let names = [
        format!("{stem}_source.png"),
        format!("{stem}_target.png"),
        format!("{stem}_keypoints.json"),
        format!("{stem}_flow.flo"),
    ];
    save_png(&pair.source, dir.join(&names[0]), BitDepth::Eight)?;
    save_png(&pair.target, dir.join(&names[1]), BitDepth::Eight)?;
    std::fs::write(dir.join(&names[2]), serde_json::to_vec_pretty(kp_json)?)?;
    if let Some(f) = &pair.gt_flow {
        write_flo(f, dir.join(&names[3]))?;
    }
    Ok(serde_json::json!({
        "id": pair.id,
        "source_path": names[0],
        "target_path": names[1],
        "keypoints_path": names[2],
        "gt_flow_path": names[3],
    }))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    create_dir(&a.out_dir)?;
    if let Some(image_path) = &a.image {
        let kp_path = a.keypoints.as_ref().expect("clap enforces --keypoints");
        let (image, _) = load_image::<f32>(image_path).with_context(|| format!("ingest: {}", image_path.display()))?;
        let kp = read_keypoints(kp_path)?;
        let pair = synth_pair(&image.to_rgb(), &kp, a.strength, a.seed).context("synth")?;
        let kp256 = kp.rescaled(pair.source.width(), pair.source.height());
        let row = write_pair(&a.out_dir, "pair", &pair, &kp256.to_json())?;
        println!("{}", serde_json::to_string(&row)?);
        return Ok(());
    }
    if a.val_count > a.count {
        bail!("--val-count {} exceeds --count {}", a.val_count, a.count);
    }
    let manifest_path = a.out_dir.join("manifest.jsonl");
    let mut manifest = BufWriter::new(File::create(&manifest_path)?);
    for i in 0..a.count {
        let (kp, pair) = synth_sample::<f32>(a.seed, i, a.strength, a.min_magnitude).context("synth")?;
        let mut row = write_pair(&a.out_dir, &pair.id, &pair, &kp.to_json())?;
        let split = if i >= a.count - a.val_count { "val" } else { "train" };
        row["split"] = split.into();
        writeln!(manifest, "{}", serde_json::to_string(&row)?)?;
    }
    manifest.flush()?;
    println!("wrote {} pairs and {}", a.count, manifest_path.display());
    Ok(())
}

fn load_split(manifest: &Path, split: Split, cache: Option<&Path>) -> Result<Vec<SamplePair32>> {
    let m = load_manifest(manifest).with_context(|| format!("manifest {}", manifest.display()))?;
    for issue in &m.issues {
        log::warn!("manifest line {}: {}", issue.line, issue.reason);
    }
    m.split(split)
        .map(|d| {
            match cache {
                Some(dir) => load_pair_cached(d, dir),
                None => load_pair::<f32>(d),
            }
            .with_context(|| format!("sample {}", d.id))
        })
        .collect()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::from_json(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if a.tiny {
        config.generator = GeneratorConfig::tiny();
    }
    config.max_steps = a.max_steps.unwrap_or(config.max_steps);
    config.learning_rate = a.learning_rate.unwrap_or(config.learning_rate);
    config.batch_size = a.batch_size.unwrap_or(config.batch_size);
    config.seed = a.seed.unwrap_or(config.seed);
    config.ablation = a.ablation.unwrap_or(config.ablation);
    config.validate().context("config")?;

    let (train_set, val_set) = match (&a.manifest, a.synthetic) {
        (Some(m), _) => (
            load_split(m, Split::Train, a.cache_dir.as_deref())?,
            load_split(m, Split::Val, a.cache_dir.as_deref())?,
        ),
        (None, Some(n)) => (
            synth_dataset(n, config.seed, 1.0, 3.0).context("synth")?,
            synth_dataset(a.val_synthetic, config.seed.wrapping_add(1), 1.0, 3.0).context("synth")?,
        ),
        (None, None) => bail!("give --manifest or --synthetic"),
    };
    log::info!("{} training pairs, {} validation pairs", train_set.len(), val_set.len());
    create_dir(&a.out_dir)?;
    std::fs::write(a.out_dir.join("config.json"), serde_json::to_vec_pretty(&config)?)?;

    if a.ablation_suite {
        let suite = run_ablation_suite(&config, &AblationTag::ALL, &train_set, &val_set, Some(&a.out_dir)).context("train")?;
        print!("{}", suite.table);
        return Ok(());
    }
    let log_path = a.out_dir.join("train.jsonl");
    let mut log = BufWriter::new(File::create(&log_path)?);
    let outcome = train(
        &config,
        &train_set,
        &val_set,
        TrainIo {
            log: Some(&mut log),
            checkpoint_dir: Some(&a.out_dir),
        },
    )
    .context("train")?;
    log.flush()?;
    if let Some(report) = &outcome.validation {
        print!("{}", render_table(&[(config.ablation.label().to_string(), report)]));
    }
    println!("checkpoint: {}", a.out_dir.join("last.bfc").display());
    Ok(())
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn eval_dirs(pred: &Path, gt: &Path) -> Result<MetricReport> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(gt)
        .with_context(|| format!("reading {}", gt.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image(p))
        .collect();
    names.sort();
    let mut samples = Vec::new();
    for g in names {
        let name = g.file_name().expect("listed file");
        let p = pred.join(name);
        let (a, _) = load_image::<f64>(&p).with_context(|| format!("prediction {}", p.display()))?;
        let (b, _) = load_image::<f64>(&g).with_context(|| format!("ground truth {}", g.display()))?;
        let (gf, pf) = (g.with_extension("flo"), p.with_extension("flo"));
        let flow_epe = if gf.is_file() && pf.is_file() {
            Some(epe(&read_flo::<f64>(&pf)?, &read_flo::<f64>(&gf)?)?)
        } else {
            None
        };
        samples.push(SampleMetrics {
            id: name.to_string_lossy().into_owned(),
            ssim: ssim(&a, &b)?,
            psnr: psnr(&a, &b)?,
            epe: flow_epe,
        });
    }
    if samples.is_empty() {
        bail!("no images in {}", gt.display());
    }
    Ok(MetricReport::from_samples(samples))
}

/// Input-vs-target metrics with no model; the flow error is that of a zero flow.
fn baseline(pairs: &[SamplePair32]) -> Result<MetricReport> {
    let samples = pairs
        .iter()
        .map(|p| {
            Ok(SampleMetrics {
                id: p.id.clone(),
                ssim: ssim(&p.source, &p.target)?,
                psnr: psnr(&p.source, &p.target)?,
                epe: p
                    .gt_flow
                    .as_ref()
                    .map(|g| epe(&FlowField32::zeros(g.height(), g.width()), g))
                    .transpose()?,
            })
        })
        .collect::<bodyflow::Result<Vec<_>>>()?;
    Ok(MetricReport::from_samples(samples))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut rows: Vec<(String, MetricReport)> = Vec::new();
    if let (Some(pred), Some(gt)) = (&a.pred_dir, &a.gt_dir) {
        rows.push((pred.display().to_string(), eval_dirs(pred, gt)?));
    } else if let Some(m) = &a.manifest {
        let split: Split = serde_json::from_value(serde_json::Value::String(a.split.clone()))
            .with_context(|| format!("unknown split `{}`", a.split))?;
        let pairs = load_split(m, split, None)?;
        if pairs.is_empty() {
            bail!("no `{}` samples in {}", a.split, m.display());
        }
        rows.push(("Baseline".into(), baseline(&pairs)?));
        if let Some(c) = &a.checkpoint {
            let (generator, id) = load_generator(c).with_context(|| format!("checkpoint: {}", c.display()))?;
            rows.push((id, evaluate(&generator, &pairs).context("evaluate")?));
        }
    } else {
        bail!("give --pred-dir with --gt-dir, or --manifest");
    }
    let table_rows: Vec<(String, &MetricReport)> = rows.iter().map(|(n, r)| (n.clone(), r)).collect();
    print!("{}", render_table(&table_rows));
    if let Some(p) = &a.json {
        let doc: serde_json::Map<String, serde_json::Value> = rows
            .iter()
            .map(|(n, r)| Ok((n.clone(), serde_json::to_value(r)?)))
            .collect::<Result<_>>()?;
        std::fs::write(p, serde_json::to_vec_pretty(&doc)?)?;
    }
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let header = inspect_checkpoint(path).with_context(|| format!("checkpoint {}", path.display()))?;
    println!("kind {} (format version {})", header.kind, header.version);
    println!("{}", serde_json::to_string_pretty(&header.meta)?);
    let mut total = 0;
    for t in &header.tensors {
        println!("{:<40} {:?}", t.name, t.shape);
        total += t.len;
    }
    println!("{} tensors, {total} scalars", header.tensors.len());
    Ok(())
}

