//! Encoder–decoder flow generator with attention at the bottleneck.

use ndarray::{s, Array3, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::imaging::Image;
use crate::keypoints::LimbTopology;
use crate::nn::{
    concat_channels, conv2d, conv2d_backward, conv2d_weight_grad, ensure_finite, instance_norm,
    instance_norm_backward, leaky_relu, leaky_relu_backward, resize_bilinear, resize_bilinear_backward,
    uniform_init, NormCache, ParamSet,
};
use crate::priors::{SkeletonMaps, StructureHeatmaps};
use crate::sasa::{self, Affinity, SasaCache, SasaWeights};
use crate::scalar::Real;

pub const RGB_CHANNELS: usize = 3;
pub const PRIOR_CHANNELS: usize = RGB_CHANNELS + LimbTopology::NUM_SKELETONS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Sasa,
    SelfAttentionOnly,
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// 15 (RGB + skeleton maps) or 3 (RGB only).
    pub input_channels: usize,
    pub base_channels: usize,
    /// Number of stride-2 stages.
    pub depth: usize,
    pub attention_mode: AttentionMode,
    pub use_skip_connections: bool,
    pub input_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            input_channels: PRIOR_CHANNELS,
            base_channels: 32,
            depth: 4,
            attention_mode: AttentionMode::Sasa,
            use_skip_connections: true,
            input_size: 256,
        }
    }
}

impl GeneratorConfig {
    /// Desk-scale network: 8 base channels, three stages.
    pub fn tiny() -> Self {
        GeneratorConfig {
            base_channels: 8,
            depth: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels != PRIOR_CHANNELS && self.input_channels != RGB_CHANNELS {
            return Err(Error::Config(format!(
                "input_channels must be {PRIOR_CHANNELS} or {RGB_CHANNELS}, got {}",
                self.input_channels
            )));
        }
        if self.base_channels == 0 || self.depth == 0 || self.input_size == 0 {
            return Err(Error::Config("base_channels, depth and input_size must be positive".into()));
        }
        if self.depth > 10 || self.input_size % (1 << self.depth) != 0 {
            return Err(Error::Config(format!(
                "input_size {} is not divisible by 2^{}",
                self.input_size, self.depth
            )));
        }
        if self.attention_mode == AttentionMode::Sasa && !self.uses_skeletons() {
            return Err(Error::Config("sasa attention requires structural priors (input_channels = 15)".into()));
        }
        Ok(())
    }

    pub fn uses_skeletons(&self) -> bool {
        self.input_channels == PRIOR_CHANNELS
    }

    pub fn uses_heatmaps(&self) -> bool {
        self.attention_mode == AttentionMode::Sasa
    }

    /// Spatial size at the bottleneck.
    pub fn bottleneck(&self) -> (usize, usize) {
        let b = self.input_size >> self.depth;
        (b, b)
    }

    /// Feature channels at `level` (0 = full resolution).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// One forward sample.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorInput<'a, T> {
    pub image: &'a Image<T>,
    pub skeletons: Option<&'a SkeletonMaps<T>>,
    pub heatmaps: Option<&'a StructureHeatmaps<T>>,
}

struct UnitTape<T> {
    input: Array3<T>,
    norm: NormCache<T>,
    pre: Array3<T>,
    stride: usize,
    name: String,
}

struct UpTape<T> {
    low: Array3<T>,
    level: usize,
}

/// Intermediates recorded by [`Generator::forward_recorded`].
pub struct Tape<T> {
    units: Vec<UnitTape<T>>,
    ups: Vec<UpTape<T>>,
    attention: Option<(SasaCache<T>, SasaWeights<T>, (usize, usize, usize))>,
    head_input: Array3<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    config: GeneratorConfig,
    params: ParamSet<T>,
}

fn unit_names(config: &GeneratorConfig) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let c0 = config.channels(0);
    out.push(("enc0.a".to_string(), config.input_channels, c0));
    out.push(("enc0.b".to_string(), c0, c0));
    for i in 1..=config.depth {
        out.push((format!("down{i}.a"), config.channels(i - 1), config.channels(i)));
        out.push((format!("down{i}.b"), config.channels(i), config.channels(i)));
    }
    for i in (0..config.depth).rev() {
        let c = config.channels(i);
        let cin = if config.use_skip_connections { 2 * c } else { c };
        out.push((format!("up{i}.a"), cin, c));
        out.push((format!("up{i}.b"), c, c));
    }
    out
}

impl<T: Real> Generator<T> {
    /// Deterministic initialization from `(config, seed)`; the flow head starts at zero.
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let conv = |rng: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize| -> ArrayD<T> {
            uniform_init(rng, &[cout, cin, k, k], cin * k * k)
        };
        for (name, cin, cout) in unit_names(&config) {
            params.insert(format!("{name}.weight"), conv(&mut rng, cout, cin, 3));
            params.insert(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[cout]), T::one()));
            params.insert(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[cout])));
            if let Some(level) = name.strip_suffix(".a").and_then(|n| n.strip_prefix("up")) {
                let i: usize = level.parse().expect("level index");
                let reduce = conv(&mut rng, config.channels(i), config.channels(i + 1), 1);
                params.insert(format!("up{i}.reduce.weight"), reduce);
            }
        }
        if config.attention_mode != AttentionMode::None {
            let w = SasaWeights::<T>::init(config.channels(config.depth), &mut rng);
            w.store("attn", &mut params, config.attention_mode == AttentionMode::Sasa);
        }
        params.insert("head.weight", ArrayD::zeros(IxDyn(&[2, config.channels(0), 3, 3])));
        params.insert("head.bias", ArrayD::zeros(IxDyn(&[2])));
        Ok(Generator { config, params })
    }

    /// Wraps existing parameters after checking every name and shape against `config`.
    pub fn from_params(config: GeneratorConfig, params: ParamSet<T>) -> Result<Self> {
        let reference = Generator::<T>::init(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, want) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != want.shape() {
                return Err(Error::Config(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(Generator { config, params })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    pub fn forward(&self, input: GeneratorInput<'_, T>) -> Result<FlowField<T>> {
        self.run(input, false).map(|(flow, _)| flow)
    }

    pub fn forward_recorded(&self, input: GeneratorInput<'_, T>) -> Result<(FlowField<T>, Tape<T>)> {
        self.run(input, true).map(|(flow, tape)| (flow, tape.expect("recorded")))
    }

    fn assemble_input(&self, input: &GeneratorInput<'_, T>) -> Result<Array3<T>> {
        let n = self.config.input_size;
        if input.image.size() != (n, n) || input.image.channels() != RGB_CHANNELS {
            return Err(Error::shape(
                "generator image",
                (RGB_CHANNELS, n, n),
                input.image.data().dim(),
            ));
        }
        if !self.config.uses_skeletons() {
            return Ok(input.image.data().clone());
        }
        let skel = input
            .skeletons
            .ok_or_else(|| Error::Config("this generator needs skeleton maps".into()))?;
        if skel.data.dim() != (LimbTopology::NUM_SKELETONS, n, n) {
            return Err(Error::shape(
                "skeleton maps",
                (LimbTopology::NUM_SKELETONS, n, n),
                skel.data.dim(),
            ));
        }
        Ok(concat_channels(input.image.view(), skel.data.view()))
    }

    fn unit(&self, name: &str, x: Array3<T>, stride: usize, tape: Option<&mut Vec<UnitTape<T>>>) -> Result<Array3<T>> {
        let y = conv2d(x.view(), self.params.kernel(&format!("{name}.weight"))?, None, stride);
        let (pre, norm) = instance_norm(
            y.view(),
            self.params.vec(&format!("{name}.gamma"))?,
            self.params.vec(&format!("{name}.beta"))?,
        );
        let out = leaky_relu(pre.view());
        if let Some(t) = tape {
            t.push(UnitTape {
                input: x,
                norm,
                pre,
                stride,
                name: name.to_string(),
            });
        }
        Ok(out)
    }

    fn run(&self, input: GeneratorInput<'_, T>, record: bool) -> Result<(FlowField<T>, Option<Tape<T>>)> {
        let cfg = &self.config;
        let x = self.assemble_input(&input)?;
        let heat = if cfg.uses_heatmaps() {
            let hm = input
                .heatmaps
                .ok_or_else(|| Error::Config("sasa attention needs structure heatmaps".into()))?;
            let (bh, bw) = cfg.bottleneck();
            if hm.data.dim() != (StructureHeatmaps::<T>::CHANNELS, bh, bw) {
                return Err(Error::shape(
                    "structure heatmaps",
                    (StructureHeatmaps::<T>::CHANNELS, bh, bw),
                    hm.data.dim(),
                ));
            }
            Some(hm)
        } else {
            None
        };

        let mut units = Vec::new();
        let mut ups = Vec::new();
        macro_rules! tape {
            () => {
                if record {
                    Some(&mut units)
                } else {
                    None
                }
            };
        }

        let mut skips = Vec::with_capacity(cfg.depth);
        let mut h = self.unit("enc0.a", x, 1, tape!())?;
        h = self.unit("enc0.b", h, 1, tape!())?;
        for i in 1..=cfg.depth {
            skips.push(h.clone());
            h = self.unit(&format!("down{i}.a"), h, 2, tape!())?;
            h = self.unit(&format!("down{i}.b"), h, 1, tape!())?;
        }

        let mut attention = None;
        if cfg.attention_mode != AttentionMode::None {
            let w = SasaWeights::load("attn", &self.params)?;
            let (c, bh, bw) = h.dim();
            let flat = h.into_shape_with_order((c, bh * bw)).expect("contiguous");
            let y = heat.map(|hm| {
                hm.data
                    .view()
                    .into_shape_with_order((StructureHeatmaps::<T>::CHANNELS, bh * bw))
                    .expect("contiguous")
            });
            let affinity = match y {
                Some(y) => Affinity::Structure(y),
                None => Affinity::Disabled,
            };
            let (out, cache) = sasa::apply(flat.view(), affinity, &w)?;
            h = out.into_shape_with_order((c, bh, bw)).expect("contiguous");
            if record {
                attention = Some((cache, w, (c, bh, bw)));
            }
        }

        for i in (0..cfg.depth).rev() {
            let reduced = conv2d(h.view(), self.params.kernel(&format!("up{i}.reduce.weight"))?, None, 1);
            let skip = &skips[i];
            let (_, sh, sw) = skip.dim();
            let mut u = resize_bilinear(reduced.view(), sh, sw);
            if cfg.use_skip_connections {
                u = concat_channels(u.view(), skip.view());
            }
            if record {
                ups.push(UpTape { low: h, level: i });
            }
            h = self.unit(&format!("up{i}.a"), u, 1, tape!())?;
            h = self.unit(&format!("up{i}.b"), h, 1, tape!())?;
        }

        let flow = conv2d(
            h.view(),
            self.params.kernel("head.weight")?,
            Some(self.params.vec("head.bias")?),
            1,
        );
        ensure_finite("generator flow", flow.view())?;
        let tape = record.then(|| Tape {
            units,
            ups,
            attention,
            head_input: h,
        });
        Ok((FlowField::new(flow)?, tape))
    }

    fn unit_backward(&self, t: UnitTape<T>, dy: Array3<T>, grads: &mut ParamSet<T>, need_input: bool) -> Result<Option<Array3<T>>> {
        let name = &t.name;
        let gamma = self.params.vec(&format!("{name}.gamma"))?;
        let d_pre = leaky_relu_backward(t.pre.view(), dy.view());
        let (d_conv, dgamma, dbeta) = instance_norm_backward(&t.norm, gamma, d_pre.view());
        grads.accumulate(&format!("{name}.gamma"), dgamma.view().into_dyn())?;
        grads.accumulate(&format!("{name}.beta"), dbeta.view().into_dyn())?;
        let w = self.params.kernel(&format!("{name}.weight"))?;
        if need_input {
            let g = conv2d_backward(t.input.view(), w, t.stride, d_conv.view());
            grads.accumulate(&format!("{name}.weight"), g.weight.view().into_dyn())?;
            Ok(Some(g.input))
        } else {
            let (dw, _) = conv2d_weight_grad(t.input.view(), w, t.stride, d_conv.view());
            grads.accumulate(&format!("{name}.weight"), dw.view().into_dyn())?;
            Ok(None)
        }
    }

    /// Accumulates `d<objective>/d<params>` into `grads` given `d_flow = d<objective>/d<flow>`.
    pub fn backward(&self, tape: Tape<T>, d_flow: &Array3<T>, grads: &mut ParamSet<T>) -> Result<()> {
        let cfg = &self.config;
        let Tape {
            mut units,
            mut ups,
            attention,
            head_input,
        } = tape;
        let head = conv2d_backward(head_input.view(), self.params.kernel("head.weight")?, 1, d_flow.view());
        grads.accumulate("head.weight", head.weight.view().into_dyn())?;
        grads.accumulate("head.bias", head.bias.view().into_dyn())?;
        let mut dh = head.input;

        let mut d_skips: Vec<Option<Array3<T>>> = (0..cfg.depth).map(|_| None).collect();
        for _ in 0..cfg.depth {
            let up = ups.pop().expect("one tape entry per decoder level");
            let i = up.level;
            let tb = units.pop().expect("decoder unit b");
            dh = self.unit_backward(tb, dh, grads, true)?.expect("input grad");
            let ta = units.pop().expect("decoder unit a");
            let du = self.unit_backward(ta, dh, grads, true)?.expect("input grad");
            let c = cfg.channels(i);
            let d_up = if cfg.use_skip_connections {
                d_skips[i] = Some(du.slice(s![c.., .., ..]).to_owned());
                du.slice(s![..c, .., ..]).to_owned()
            } else {
                du
            };
            let (_, lh, lw) = up.low.dim();
            let d_reduced = resize_bilinear_backward(d_up.view(), lh, lw);
            let name = format!("up{i}.reduce.weight");
            let g = conv2d_backward(up.low.view(), self.params.kernel(&name)?, 1, d_reduced.view());
            grads.accumulate(&name, g.weight.view().into_dyn())?;
            dh = g.input;
        }

        if let Some((cache, w, (c, bh, bw))) = attention {
            let flat = dh.into_shape_with_order((c, bh * bw)).expect("contiguous");
            let (dx, dw) = sasa::apply_backward(&cache, &w, flat.view());
            dw.accumulate_into("attn", grads)?;
            dh = dx.into_shape_with_order((c, bh, bw)).expect("contiguous");
        }

        for i in (1..=cfg.depth).rev() {
            let tb = units.pop().expect("encoder unit b");
            dh = self.unit_backward(tb, dh, grads, true)?.expect("input grad");
            let ta = units.pop().expect("encoder unit a");
            dh = self.unit_backward(ta, dh, grads, true)?.expect("input grad");
            if let Some(ds) = d_skips[i - 1].take() {
                dh += &ds;
            }
        }
        let tb = units.pop().expect("stem unit b");
        dh = self.unit_backward(tb, dh, grads, true)?.expect("input grad");
        let ta = units.pop().expect("stem unit a");
        self.unit_backward(ta, dh, grads, false)?;
        debug_assert!(units.is_empty());
        Ok(())
    }

    /// Parameter count of tensors whose names appear in both generators.
    pub fn shared_scalars(&self, other: &Generator<T>) -> (usize, usize) {
        let mut a = 0;
        let mut b = 0;
        for (name, t) in self.params.iter() {
            if let Ok(o) = other.params.get(name) {
                a += t.len();
                b += o.len();
            }
        }
        (a, b)
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

/// Zero-valued gradient buffers matching `generator`'s parameters.
pub fn zero_grads<T: Real>(generator: &Generator<T>) -> ParamSet<T> {
    generator.params().zeros_like()
}
