//! Structure Affinity Self-Attention over a bottleneck feature block.
//!
//! Features are flattened to `C × N` (`N = h·w`, row-major locations). Maps are
//! `N × N` with entry `(i, j)` relating output location `i` to source location `j`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ensure_finite, uniform_init, ParamSet};
use crate::priors::StructureHeatmaps;
use crate::scalar::Real;

/// `N × N` attention/affinity matrix.
pub type AttentionMap<T> = Array2<T>;

/// Projection width of the key/query (and structure) branches for `c` feature channels.
pub fn inner_channels(c: usize) -> usize {
    (c / 8).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SasaWeights<T> {
    pub key_weight: Array2<T>,
    pub key_bias: Array1<T>,
    pub query_weight: Array2<T>,
    pub query_bias: Array1<T>,
    pub value_weight: Array2<T>,
    pub value_bias: Array1<T>,
    pub structure_weight: Array2<T>,
    pub structure_bias: Array1<T>,
    pub gamma: T,
}

const NAMES: [&str; 9] = [
    "key.weight",
    "key.bias",
    "query.weight",
    "query.bias",
    "value.weight",
    "value.bias",
    "structure.weight",
    "structure.bias",
    "gamma",
];

impl<T: Real> SasaWeights<T> {
    pub fn zeros(channels: usize) -> Self {
        let ci = inner_channels(channels);
        let cs = StructureHeatmaps::<T>::CHANNELS;
        SasaWeights {
            key_weight: Array2::zeros((ci, channels)),
            key_bias: Array1::zeros(ci),
            query_weight: Array2::zeros((ci, channels)),
            query_bias: Array1::zeros(ci),
            value_weight: Array2::zeros((channels, channels)),
            value_bias: Array1::zeros(channels),
            structure_weight: Array2::zeros((ci, cs)),
            structure_bias: Array1::zeros(ci),
            gamma: T::zero(),
        }
    }

    /// Uniform fan-in initialization with zero biases and `gamma = 0`.
    pub fn init<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let mut w = Self::zeros(channels);
        let cs = StructureHeatmaps::<T>::CHANNELS;
        for (m, fan_in) in [
            (&mut w.key_weight, channels),
            (&mut w.query_weight, channels),
            (&mut w.value_weight, channels),
            (&mut w.structure_weight, cs),
        ] {
            let init: ndarray::ArrayD<T> = uniform_init(rng, m.shape(), fan_in);
            m.assign(&init.into_dimensionality::<ndarray::Ix2>().expect("2-D"));
        }
        w
    }

    pub fn channels(&self) -> usize {
        self.value_weight.nrows()
    }

    pub fn inner(&self) -> usize {
        self.key_weight.nrows()
    }

    /// Stores the tensors under `{prefix}.key.weight`, ..., `{prefix}.gamma`; the structure
    /// projection is skipped when `with_structure` is false.
    pub fn store(&self, prefix: &str, params: &mut ParamSet<T>, with_structure: bool) {
        let gamma = Array1::from_elem(1, self.gamma);
        let arrays = [
            self.key_weight.view().into_dyn(),
            self.key_bias.view().into_dyn(),
            self.query_weight.view().into_dyn(),
            self.query_bias.view().into_dyn(),
            self.value_weight.view().into_dyn(),
            self.value_bias.view().into_dyn(),
            self.structure_weight.view().into_dyn(),
            self.structure_bias.view().into_dyn(),
            gamma.view().into_dyn(),
        ];
        for (name, a) in NAMES.iter().zip(arrays) {
            if with_structure || !name.starts_with("structure") {
                params.insert(format!("{prefix}.{name}"), a.to_owned());
            }
        }
    }

    /// Loads tensors written by [`SasaWeights::store`]; an absent structure projection loads as zeros.
    pub fn load(prefix: &str, params: &ParamSet<T>) -> Result<Self> {
        let m = |n: &str| params.mat(&format!("{prefix}.{n}")).map(|v| v.to_owned());
        let v = |n: &str| params.vec(&format!("{prefix}.{n}")).map(|v| v.to_owned());
        if !params.contains(&format!("{prefix}.structure.weight")) {
            let value_weight = m("value.weight")?;
            let mut w = SasaWeights::zeros(value_weight.nrows());
            w.key_weight = m("key.weight")?;
            w.key_bias = v("key.bias")?;
            w.query_weight = m("query.weight")?;
            w.query_bias = v("query.bias")?;
            w.value_weight = value_weight;
            w.value_bias = v("value.bias")?;
            w.gamma = params.scalar(&format!("{prefix}.gamma"))?;
            w.validate()?;
            return Ok(w);
        }
        let w = SasaWeights {
            key_weight: m("key.weight")?,
            key_bias: v("key.bias")?,
            query_weight: m("query.weight")?,
            query_bias: v("query.bias")?,
            value_weight: m("value.weight")?,
            value_bias: v("value.bias")?,
            structure_weight: m("structure.weight")?,
            structure_bias: v("structure.bias")?,
            gamma: params.scalar(&format!("{prefix}.gamma"))?,
        };
        w.validate()?;
        Ok(w)
    }

    /// Adds these tensors (as gradients) into `params` under `prefix`, skipping tensors
    /// that `params` does not hold.
    pub fn accumulate_into(&self, prefix: &str, params: &mut ParamSet<T>) -> Result<()> {
        let gamma = Array1::from_elem(1, self.gamma);
        let arrays = [
            self.key_weight.view().into_dyn(),
            self.key_bias.view().into_dyn(),
            self.query_weight.view().into_dyn(),
            self.query_bias.view().into_dyn(),
            self.value_weight.view().into_dyn(),
            self.value_bias.view().into_dyn(),
            self.structure_weight.view().into_dyn(),
            self.structure_bias.view().into_dyn(),
            gamma.view().into_dyn(),
        ];
        for (name, a) in NAMES.iter().zip(arrays) {
            let key = format!("{prefix}.{name}");
            if params.contains(&key) {
                params.accumulate(&key, a)?;
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        let ci = self.inner();
        let cs = StructureHeatmaps::<T>::CHANNELS;
        let ok = self.value_weight.dim() == (c, c)
            && self.value_bias.len() == c
            && self.key_weight.dim() == (ci, c)
            && self.key_bias.len() == ci
            && self.query_weight.dim() == (ci, c)
            && self.query_bias.len() == ci
            && self.structure_weight.ncols() == cs
            && self.structure_bias.len() == self.structure_weight.nrows();
        if ok {
            Ok(())
        } else {
            Err(Error::Config("inconsistent attention projection shapes".into()))
        }
    }
}

/// `W·X + b` for a 1×1 projection of a `C × N` block.
pub fn project<T: Real>(w: ArrayView2<T>, b: ArrayView1<T>, x: ArrayView2<T>) -> Array2<T> {
    let mut out = w.dot(&x);
    out += &b.insert_axis(Axis(1));
    out
}

/// `θ_k(X)ᵀ θ_q(X)`: entry `(i, j)` is `<k_i, q_j>`.
pub fn self_attention_map<T: Real>(x: ArrayView2<T>, w: &SasaWeights<T>) -> AttentionMap<T> {
    let k = project(w.key_weight.view(), w.key_bias.view(), x);
    let q = project(w.query_weight.view(), w.query_bias.view(), x);
    k.t().dot(&q)
}

/// `θ_g(Y)ᵀ θ_g(Y)` over the five structure channels.
pub fn structure_affinity_map<T: Real>(y: ArrayView2<T>, w: &SasaWeights<T>) -> AttentionMap<T> {
    let g = project(w.structure_weight.view(), w.structure_bias.view(), y);
    g.t().dot(&g)
}

/// Subtracts the global mean over all entries.
pub fn center<T: Real>(m: &AttentionMap<T>) -> AttentionMap<T> {
    let mean = m.mean().unwrap_or_else(T::zero);
    m.mapv(|v| v - mean)
}

fn centered_sigmoid<T: Real>(mut m: AttentionMap<T>) -> AttentionMap<T> {
    let mean = m.mean().unwrap_or_else(T::zero);
    m.mapv_inplace(|v| (v - mean).sigmoid());
    m
}

/// `σ(center(att)) ⊙ σ(center(aff))`.
pub fn compose<T: Real>(att: &AttentionMap<T>, aff: &AttentionMap<T>) -> Result<AttentionMap<T>> {
    if att.dim() != aff.dim() {
        return Err(Error::shape("attention composition", att.dim(), aff.dim()));
    }
    let mut out = center(att).mapv(Real::sigmoid);
    out.zip_mut_with(&center(aff), |a, &f| *a = *a * f.sigmoid());
    Ok(out)
}

/// Row-wise softmax over source locations.
pub fn softmax_rows<T: Real>(m: &AttentionMap<T>) -> AttentionMap<T> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Second operand of the attention composition.
#[derive(Clone, Copy, Debug)]
pub enum Affinity<'a, T> {
    /// Structure heatmaps flattened to `5 × N`: the composed SASA map.
    Structure(ArrayView2<'a, T>),
    /// No affinity branch: standard softmax self-attention.
    Disabled,
}

/// Intermediates kept by [`apply`] for the backward pass.
#[derive(Clone, Debug)]
pub struct SasaCache<T> {
    x: Array2<T>,
    y: Option<Array2<T>>,
    k: Array2<T>,
    q: Array2<T>,
    v: Array2<T>,
    g: Option<Array2<T>>,
    /// σ(center(att)) for SASA, softmax(att) otherwise.
    sa: Array2<T>,
    sf: Option<Array2<T>>,
    weights_map: Array2<T>,
    alpha: Array2<T>,
}

impl<T: Real> SasaCache<T> {
    /// The composed (or softmax) map actually used to aggregate values.
    pub fn map(&self) -> &AttentionMap<T> {
        &self.weights_map
    }

    pub fn alpha(&self) -> &Array2<T> {
        &self.alpha
    }
}

/// `X̂ = X + γ·α` with `α_i = Σ_j Φ(i, j)·θ_v(X)_j`.
pub fn apply<T: Real>(x: ArrayView2<T>, affinity: Affinity<'_, T>, w: &SasaWeights<T>) -> Result<(Array2<T>, SasaCache<T>)> {
    let (c, n) = x.dim();
    if c != w.channels() {
        return Err(Error::shape("attention input channels", w.channels(), c));
    }
    let k = project(w.key_weight.view(), w.key_bias.view(), x);
    let q = project(w.query_weight.view(), w.query_bias.view(), x);
    let v = project(w.value_weight.view(), w.value_bias.view(), x);
    let att = k.t().dot(&q);
    ensure_finite("self-attention map", att.view())?;
    let (sa, sf, g, y, map) = match affinity {
        Affinity::Structure(y) => {
            if y.dim() != (StructureHeatmaps::<T>::CHANNELS, n) {
                return Err(Error::shape("structure heatmaps", (StructureHeatmaps::<T>::CHANNELS, n), y.dim()));
            }
            let g = project(w.structure_weight.view(), w.structure_bias.view(), y);
            let aff = g.t().dot(&g);
            ensure_finite("structure affinity map", aff.view())?;
            let sa = centered_sigmoid(att);
            let sf = centered_sigmoid(aff);
            let map = &sa * &sf;
            (sa, Some(sf), Some(g), Some(y.to_owned()), map)
        }
        Affinity::Disabled => {
            let sa = softmax_rows(&att);
            let map = sa.clone();
            (sa, None, None, None, map)
        }
    };
    let alpha = v.dot(&map.t());
    let out = &x + &alpha.mapv(|a| a * w.gamma);
    ensure_finite("attention output", out.view())?;
    Ok((
        out,
        SasaCache {
            x: x.to_owned(),
            y,
            k,
            q,
            v,
            g,
            sa,
            sf,
            weights_map: map,
            alpha,
        },
    ))
}

/// Gradients of [`apply`]: `(dX, dWeights)`.
pub fn apply_backward<T: Real>(cache: &SasaCache<T>, w: &SasaWeights<T>, d_out: ArrayView2<T>) -> (Array2<T>, SasaWeights<T>) {
    let one = T::one();
    let mut grads = SasaWeights::zeros(w.channels());
    grads.structure_weight = Array2::zeros(w.structure_weight.raw_dim());
    grads.structure_bias = Array1::zeros(w.structure_bias.len());
    grads.gamma = (&d_out * &cache.alpha).sum();

    let d_alpha = d_out.mapv(|g| g * w.gamma);
    let d_v = d_alpha.dot(&cache.weights_map);
    let d_map = d_alpha.t().dot(&cache.v);

    let d_att = match (&cache.sf, &cache.g, &cache.y) {
        (Some(sf), Some(g), Some(y)) => {
            let mut d_ac = d_map.clone();
            ndarray::Zip::from(&mut d_ac)
                .and(sf)
                .and(&cache.sa)
                .for_each(|d, &f, &a| *d = *d * f * a * (one - a));
            let mut d_fc = d_map;
            ndarray::Zip::from(&mut d_fc)
                .and(sf)
                .and(&cache.sa)
                .for_each(|d, &f, &a| *d = *d * a * f * (one - f));
            let d_aff = center(&d_fc);
            let d_g = g.dot(&(&d_aff + &d_aff.t()));
            grads.structure_weight = d_g.dot(&y.t());
            grads.structure_bias = d_g.sum_axis(Axis(1));
            center(&d_ac)
        }
        _ => {
            // softmax rows: dA = S ⊙ (dS − Σ_j dS·S)
            let s = &cache.sa;
            let mut d = d_map;
            for (mut drow, srow) in d.rows_mut().into_iter().zip(s.rows()) {
                let dot = drow.dot(&srow);
                ndarray::Zip::from(&mut drow).and(&srow).for_each(|g, &p| *g = p * (*g - dot));
            }
            d
        }
    };

    let d_k = cache.q.dot(&d_att.t());
    let d_q = cache.k.dot(&d_att);
    let xt = cache.x.t();
    grads.key_weight = d_k.dot(&xt);
    grads.key_bias = d_k.sum_axis(Axis(1));
    grads.query_weight = d_q.dot(&xt);
    grads.query_bias = d_q.sum_axis(Axis(1));
    grads.value_weight = d_v.dot(&xt);
    grads.value_bias = d_v.sum_axis(Axis(1));

    let mut d_x = d_out.to_owned();
    d_x += &w.key_weight.t().dot(&d_k);
    d_x += &w.query_weight.t().dot(&d_q);
    d_x += &w.value_weight.t().dot(&d_v);
    (d_x, grads)
}
