//! Training loop, Adam, checkpoints, evaluation and the ablation suite.

use std::borrow::Cow;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{read_header, Container, ContainerHeader};
use crate::data::{augment, AugmentRanges, SamplePair};
use crate::error::{Error, Result};
use crate::generator::{zero_grads, AttentionMode, Generator, GeneratorConfig, GeneratorInput, RGB_CHANNELS};
use crate::losses::{
    loss_flow, loss_flow_grad, loss_img, loss_img_grad, loss_orth_grad, loss_orth_summed, total_loss, LossParts, LossWeights,
};
use crate::metrics::{epe, psnr, render_table, ssim, MetricReport, SampleMetrics};
use crate::nn::ParamSet;
use crate::priors::{encode_structure, StructureHeatmaps};
use crate::scalar::Real;
use crate::warp::{warp, warp_backward};

/// Which Table-2 variant a run trains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationTag {
    #[default]
    Full,
    /// RGB input only: no skeleton maps, no structure affinity.
    WoSp,
    /// RGB + skeleton maps with plain softmax self-attention.
    WoAff,
}

impl AblationTag {
    pub const ALL: [AblationTag; 3] = [AblationTag::Full, AblationTag::WoAff, AblationTag::WoSp];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationTag::Full => "full",
            AblationTag::WoSp => "wo_sp",
            AblationTag::WoAff => "wo_aff",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationTag::Full => "Ours (full)",
            AblationTag::WoSp => "w/o SP (RGB only)",
            AblationTag::WoAff => "w/o AFF (RGB+SP)",
        }
    }

    /// The generator configuration this variant trains, derived from the base one.
    pub fn apply(self, base: &GeneratorConfig) -> GeneratorConfig {
        let mut g = base.clone();
        let demote = |m: AttentionMode| match m {
            AttentionMode::Sasa => AttentionMode::SelfAttentionOnly,
            other => other,
        };
        match self {
            AblationTag::Full => {}
            AblationTag::WoSp => {
                g.input_channels = RGB_CHANNELS;
                g.attention_mode = demote(g.attention_mode);
            }
            AblationTag::WoAff => g.attention_mode = demote(g.attention_mode),
        }
        g
    }
}

impl std::str::FromStr for AblationTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AblationTag::Full),
            "wo_sp" => Ok(AblationTag::WoSp),
            "wo_aff" => Ok(AblationTag::WoAff),
            other => Err(Error::Config(format!("unknown ablation tag `{other}` (full, wo_sp, wo_aff)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Base generator; the ablation tag adjusts inputs and attention.
    pub generator: GeneratorConfig,
    pub augmentation: AugmentRanges,
    pub adam: AdamParams,
    /// Steps between validation passes.
    pub validate_every: usize,
    /// Steps between checkpoint writes; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub ablation: AblationTag,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            batch_size: 4,
            max_steps: 1000,
            seed: 0,
            loss_weights: LossWeights::default(),
            generator: GeneratorConfig::default(),
            augmentation: AugmentRanges::default(),
            adam: AdamParams::default(),
            validate_every: 100,
            checkpoint_every: 0,
            ablation: AblationTag::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.validate_every == 0 {
            return Err(Error::Config("batch_size, max_steps and validate_every must be positive".into()));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam parameters {a:?}")));
        }
        self.loss_weights.validate()?;
        self.augmentation.validate()?;
        self.generator_config().validate()
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        self.ablation.apply(&self.generator)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

/// Adam with bias correction and no schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub hyper: AdamParams,
    pub learning_rate: f64,
    pub t: u64,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(hyper: AdamParams, learning_rate: f64, like: &ParamSet<T>) -> Self {
        Adam {
            hyper,
            learning_rate,
            t: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    pub fn update(&mut self, weights: &mut ParamSet<T>, grads: &ParamSet<T>) -> Result<()> {
        self.t += 1;
        let h = self.hyper;
        let (b1, b2) = (T::lit(h.beta1), T::lit(h.beta2));
        let bc1 = T::lit(1.0 - h.beta1.powf(self.t as f64));
        let bc2 = T::lit(1.0 - h.beta2.powf(self.t as f64));
        let (lr, eps, one) = (T::lit(self.learning_rate), T::lit(h.eps), T::one());
        for (name, w) in weights.iter_mut() {
            let g = grads.get(name)?;
            let m = self.m.get_mut(name)?;
            Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (one - b1) * g);
            let v = self.v.get_mut(name)?;
            Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (one - b2) * g * g);
            let (m, v) = (self.m.get(name)?, self.v.get(name)?);
            Zip::from(w).and(m).and(v).for_each(|w, &m, &v| {
                *w -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_img: f64,
    pub l_flow: f64,
    pub l_orth: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epe: Option<f64>,
}

/// Heatmaps at the generator's bottleneck when its attention needs them.
pub fn heatmaps_for<T: Real>(pair: &SamplePair<T>, config: &GeneratorConfig) -> Option<StructureHeatmaps<T>> {
    config.uses_heatmaps().then(|| encode_structure(&pair.pafs, config.bottleneck()))
}

pub fn generator_input<'a, T: Real>(
    pair: &'a SamplePair<T>,
    config: &GeneratorConfig,
    heatmaps: &'a Option<StructureHeatmaps<T>>,
) -> GeneratorInput<'a, T> {
    GeneratorInput {
        image: &pair.source,
        skeletons: config.uses_skeletons().then_some(&pair.skeletons),
        heatmaps: heatmaps.as_ref(),
    }
}

pub struct Trainer<T> {
    config: TrainConfig,
    generator: Generator<T>,
    adam: Adam<T>,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::init(config.generator_config(), config.seed)?;
        let adam = Adam::new(config.adam, config.learning_rate, generator.params());
        Ok(Trainer { config, generator, adam })
    }

    /// Continues from a checkpoint, restoring the optimizer state when it was saved.
    pub fn resume(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        if ckpt.generator != config.generator_config() {
            return Err(Error::Config("checkpoint generator differs from the training configuration".into()));
        }
        let generator = ckpt.generator::<T>()?;
        let mut adam = Adam::new(config.adam, config.learning_rate, generator.params());
        if let Some(state) = &ckpt.optimizer {
            adam.t = state.t;
            adam.m = state.m.cast();
            adam.v = state.v.cast();
        }
        Ok(Trainer { config, generator, adam })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &Generator<T> {
        &self.generator
    }

    pub fn step(&self) -> u64 {
        self.adam.t
    }

    /// Batch-mean loss parts and gradient of the batch-mean total loss, with `mu = 1`.
    pub fn batch_gradient(&self, batch: &[&SamplePair<T>]) -> Result<(LossParts, ParamSet<T>)> {
        let cfg = self.generator.config().clone();
        let w = self.config.loss_weights;
        let inv_b = 1.0 / batch.len() as f64;
        let mut grads = zero_grads(&self.generator);
        let mut parts = LossParts::default();
        for pair in batch {
            let gt = pair
                .gt_flow
                .as_ref()
                .ok_or_else(|| Error::Invalid(format!("sample {} has no ground-truth flow", pair.id)))?;
            let heat = heatmaps_for(pair, &cfg);
            let (flow, tape) = self.generator.forward_recorded(generator_input(pair, &cfg, &heat))?;
            let warped = warp(&pair.source, &flow, T::one())?;
            let limb_dir = pair.pafs.summed();
            let orth = loss_orth_summed(&flow, limb_dir.view())?;
            parts.img += loss_img(&warped, &pair.target)?.as_f64() * inv_b;
            parts.flow += loss_flow(&flow, gt)?.as_f64() * inv_b;
            parts.orth += orth.value.as_f64() * inv_b;

            let d_warped = loss_img_grad(&warped, &pair.target)?;
            let mut d_flow = warp_backward(&pair.source, &flow, T::one(), &d_warped)?.flow.into_data();
            d_flow.mapv_inplace(|v| v * T::lit(w.lambda_img * inv_b));
            d_flow.scaled_add(T::lit(w.lambda_flow * inv_b), &loss_flow_grad(&flow, gt)?);
            d_flow.scaled_add(T::lit(w.lambda_orth * inv_b), &loss_orth_grad(&flow, limb_dir.view())?);
            self.generator.backward(tape, &d_flow, &mut grads)?;
        }
        Ok((parts, grads))
    }

    /// One optimizer step; the record holds the loss before the update.
    pub fn train_step(&mut self, batch: &[&SamplePair<T>]) -> Result<StepRecord> {
        let step = self.adam.t;
        let (parts, grads) = self.batch_gradient(batch)?;
        let total = total_loss(parts, &self.config.loss_weights);
        if !total.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|p| p.id.as_str()).collect();
            return Err(Error::Numeric {
                what: "training loss".into(),
                location: format!("step {step}, samples {ids:?}, parts {parts:?}"),
            });
        }
        self.adam.update(self.generator.params_mut(), &grads)?;
        Ok(StepRecord {
            step,
            l_img: parts.img,
            l_flow: parts.flow,
            l_orth: parts.orth,
            total,
            epe: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            generator: self.generator.config().clone(),
            train: Some(self.config.clone()),
            step: self.adam.t,
            params: self.generator.params().cast(),
            optimizer: Some(AdamState {
                t: self.adam.t,
                m: self.adam.m.cast(),
                v: self.adam.v.cast(),
            }),
        }
    }
}

/// SSIM/PSNR of the warped source against the target and EPE against the ground truth.
pub fn evaluate<T: Real>(generator: &Generator<T>, pairs: &[SamplePair<T>]) -> Result<MetricReport> {
    let cfg = generator.config();
    let mut samples = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let heat = heatmaps_for(pair, cfg);
        let flow = generator.forward(generator_input(pair, cfg, &heat))?;
        let warped = warp(&pair.source, &flow, T::one())?;
        samples.push(SampleMetrics {
            id: pair.id.clone(),
            ssim: ssim(&warped, &pair.target)?,
            psnr: psnr(&warped, &pair.target)?,
            epe: pair.gt_flow.as_ref().map(|gt| epe(&flow, gt)).transpose()?,
        });
    }
    Ok(MetricReport::from_samples(samples))
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Where training output goes besides the returned outcome.
#[derive(Default)]
pub struct TrainIo<'a> {
    /// Receives one JSON record per step.
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<&'a Path>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
    /// Final validation pass, if a validation set was given.
    pub validation: Option<MetricReport>,
}

/// Trains from scratch. Batches walk a per-epoch shuffle of `train_set`; augmentation
/// seeds derive from `(seed, epoch, sample index)`.
pub fn train<T: Real>(
    config: &TrainConfig,
    train_set: &[SamplePair<T>],
    val_set: &[SamplePair<T>],
    mut io: TrainIo<'_>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mut trainer = Trainer::<T>::new(config.clone())?;
    let n = train_set.len();
    let b = config.batch_size;
    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = u64::MAX;
    let mut log = Vec::with_capacity(config.max_steps);
    let mut validation = None;
    if let Some(dir) = io.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    for step in 0..config.max_steps {
        let mut batch: Vec<Cow<SamplePair<T>>> = Vec::with_capacity(b);
        for j in 0..b {
            let g = step * b + j;
            let epoch = (g / n) as u64;
            if epoch != order_epoch {
                order = (0..n).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(config.seed, epoch, u64::MAX)));
                order_epoch = epoch;
            }
            let idx = order[g % n];
            let pair = &train_set[idx];
            batch.push(if config.augmentation.is_none() {
                Cow::Borrowed(pair)
            } else {
                let params = config.augmentation.sample(mix(config.seed, epoch, idx as u64));
                Cow::Owned(augment(pair, &params)?)
            });
        }
        let refs: Vec<&SamplePair<T>> = batch.iter().map(|c| c.as_ref()).collect();
        let mut record = trainer.train_step(&refs)?;

        let done = step + 1 == config.max_steps;
        if !val_set.is_empty() && ((step + 1) % config.validate_every == 0 || done) {
            let report = evaluate(trainer.generator(), val_set)?;
            record.epe = report.epe;
            log::info!(
                "step {} total {:.4} val epe {:?}",
                step + 1,
                record.total,
                report.epe
            );
            validation = Some(report);
        }
        if let Some(w) = io.log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n").map_err(|e| Error::io("training log", e))?;
        }
        log.push(record);
        if let Some(dir) = io.checkpoint_dir {
            let periodic = config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0;
            if periodic {
                save_checkpoint(&trainer.checkpoint(), dir.join(format!("step-{:06}.bfc", step + 1)))?;
            }
            if done {
                save_checkpoint(&trainer.checkpoint(), dir.join("last.bfc"))?;
            }
        }
    }
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        log,
        validation,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
}

/// Generator weights plus everything needed to resume or reproduce a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub generator: GeneratorConfig,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub params: ParamSet<f32>,
    pub optimizer: Option<AdamState>,
}

const CHECKPOINT_KIND: &str = "checkpoint";

impl Checkpoint {
    pub fn from_generator<T: Real>(generator: &Generator<T>) -> Self {
        Checkpoint {
            generator: generator.config().clone(),
            train: None,
            step: 0,
            params: generator.params().cast(),
            optimizer: None,
        }
    }

    pub fn generator<T: Real>(&self) -> Result<Generator<T>> {
        Generator::from_params(self.generator.clone(), self.params.cast())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            CHECKPOINT_KIND,
            json!({
                "generator": self.generator,
                "train": self.train,
                "step": self.step,
                "adam_t": self.optimizer.as_ref().map(|o| o.t),
            }),
        );
        for (name, t) in self.params.iter() {
            c.insert(format!("param/{name}"), t.clone());
        }
        if let Some(o) = &self.optimizer {
            for (name, t) in o.m.iter() {
                c.insert(format!("adam_m/{name}"), t.clone());
            }
            for (name, t) in o.v.iter() {
                c.insert(format!("adam_v/{name}"), t.clone());
            }
        }
        c
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!("container holds `{}`, not a checkpoint", c.kind)));
        }
        let field = |k: &str| c.meta.get(k).cloned().unwrap_or(serde_json::Value::Null);
        let generator: GeneratorConfig =
            serde_json::from_value(field("generator")).map_err(|e| Error::Corrupt(format!("generator config: {e}")))?;
        let train: Option<TrainConfig> =
            serde_json::from_value(field("train")).map_err(|e| Error::Corrupt(format!("train config: {e}")))?;
        let step = field("step").as_u64().unwrap_or(0);
        let adam_t = field("adam_t").as_u64();
        let (mut params, mut m, mut v) = (ParamSet::new(), ParamSet::new(), ParamSet::new());
        for (name, t) in c.tensors {
            let put = |set: &mut ParamSet<f32>, rest: &str, t: ArrayD<f32>| set.insert(rest, t);
            if let Some(rest) = name.strip_prefix("param/") {
                put(&mut params, rest, t);
            } else if let Some(rest) = name.strip_prefix("adam_m/") {
                put(&mut m, rest, t);
            } else if let Some(rest) = name.strip_prefix("adam_v/") {
                put(&mut v, rest, t);
            } else {
                return Err(Error::Corrupt(format!("unexpected tensor `{name}` in checkpoint")));
            }
        }
        let optimizer = adam_t.map(|t| AdamState { t, m, v });
        let ckpt = Checkpoint {
            generator,
            train,
            step,
            params,
            optimizer,
        };
        // shapes and names must match the architecture
        ckpt.generator::<f32>()?;
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.to_container().write(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_container(Container::read(path)?)
}

/// Lists tensor names and shapes without reading the payload.
pub fn inspect_checkpoint(path: impl AsRef<Path>) -> Result<ContainerHeader> {
    read_header(path)
}

pub struct AblationRun {
    pub tag: AblationTag,
    pub outcome: TrainOutcome,
    pub report: MetricReport,
}

pub struct AblationSuite {
    pub runs: Vec<AblationRun>,
    /// Table-2 layout.
    pub table: String,
}

impl AblationSuite {
    pub fn run(&self, tag: AblationTag) -> Option<&AblationRun> {
        self.runs.iter().find(|r| r.tag == tag)
    }
}

/// Trains each variant under the same seed and budget and evaluates it on `val_set`.
/// Checkpoints (`<tag>.bfc`), logs (`<tag>.jsonl`) and the table go to `out_dir` if given.
pub fn run_ablation_suite<T: Real>(
    base: &TrainConfig,
    tags: &[AblationTag],
    train_set: &[SamplePair<T>],
    val_set: &[SamplePair<T>],
    out_dir: Option<&Path>,
) -> Result<AblationSuite> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut runs = Vec::new();
    for &tag in tags {
        let config = TrainConfig {
            ablation: tag,
            ..base.clone()
        };
        let mut file = match out_dir {
            Some(dir) => {
                let p = dir.join(format!("{}.jsonl", tag.as_str()));
                Some(std::io::BufWriter::new(std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?))
            }
            None => None,
        };
        let io = TrainIo {
            log: file.as_mut().map(|f| f as &mut dyn Write),
            checkpoint_dir: None,
        };
        let outcome = train(&config, train_set, val_set, io)?;
        drop(file);
        let report = evaluate(&outcome.checkpoint.generator::<T>()?, val_set)?;
        if let Some(dir) = out_dir {
            save_checkpoint(&outcome.checkpoint, dir.join(format!("{}.bfc", tag.as_str())))?;
        }
        runs.push(AblationRun { tag, outcome, report });
    }
    let rows: Vec<(String, &MetricReport)> = runs.iter().map(|r| (r.tag.label().to_string(), &r.report)).collect();
    let table = render_table(&rows);
    if let Some(dir) = out_dir {
        let p = dir.join("table.txt");
        std::fs::write(&p, &table).map_err(|e| Error::io(&p, e))?;
    }
    Ok(AblationSuite { runs, table })
}
