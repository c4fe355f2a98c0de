//! Conditional noise-prediction network and per-class embedding table.

use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::nn::layers::{silu, silu_backward};
use crate::nn::{Linear, Param};
use crate::seed::{self, Rng};
use crate::taxonomy::ClassTaxonomy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            hidden: 256,
            blocks: 2,
            embed_dim: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn pixels(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0
            || self.width == 0
            || self.hidden == 0
            || self.embed_dim == 0
            || self.embed_dim % 2 != 0
        {
            return Err(Error::config(format!("invalid denoiser config {self:?}")));
        }
        Ok(())
    }
}

/// One learned conditioning vector per class, in taxonomy order.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    class_ids: Vec<String>,
    vectors: Param,
}

impl EmbeddingTable {
    /// Unit-gaussian vectors; each class draws from
    /// its own substream so adding a class leaves the others unchanged.
    pub fn init(taxonomy: &ClassTaxonomy, dim: usize, seed: u64) -> Self {
        let class_ids: Vec<String> = taxonomy.ids().map(str::to_string).collect();
        let mut v = Array2::zeros((class_ids.len(), dim));
        for (i, c) in class_ids.iter().enumerate() {
            let mut rng = seed::rng(seed, &format!("embedding/{c}"), 0);
            for x in v.row_mut(i) {
                let z: f32 = StandardNormal.sample(&mut rng);
                *x = z;
            }
        }
        Self {
            class_ids,
            vectors: Param::new(v),
        }
    }

    /// Extend to `taxonomy`, keeping vectors for known classes and initializing new ones.
    pub fn extended(&self, taxonomy: &ClassTaxonomy, seed: u64) -> Self {
        let mut fresh = Self::init(taxonomy, self.dim(), seed);
        for (i, c) in fresh.class_ids.clone().iter().enumerate() {
            if let Some(j) = self.index_of(c) {
                fresh
                    .vectors
                    .value
                    .row_mut(i)
                    .assign(&self.vectors.value.row(j));
            }
        }
        fresh
    }

    pub fn from_parts(class_ids: Vec<String>, vectors: Array2<f32>) -> Result<Self> {
        if class_ids.len() != vectors.nrows() {
            return Err(Error::data("embedding table rows do not match class list"));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("embedding table contains non-finite values"));
        }
        Ok(Self {
            class_ids,
            vectors: Param::new(vectors),
        })
    }

    pub fn same_values(&self, other: &Self) -> bool {
        self.class_ids == other.class_ids && self.vectors.value == other.vectors.value
    }

    pub fn dim(&self) -> usize {
        self.vectors.value.ncols()
    }

    pub fn class_ids(&self) -> &[String] {
        &self.class_ids
    }

    pub fn index_of(&self, class_id: &str) -> Option<usize> {
        self.class_ids.iter().position(|c| c == class_id)
    }

    pub fn vector(&self, index: usize) -> Vec<f32> {
        self.vectors.value.row(index).to_vec()
    }

    pub fn vectors(&self) -> &Array2<f32> {
        &self.vectors.value
    }

    pub(crate) fn param_mut(&mut self) -> &mut Param {
        &mut self.vectors
    }

    pub fn is_finite(&self) -> bool {
        self.vectors.is_finite()
    }

    pub fn write_to(&self, ar: &mut Archive) {
        ar.push(
            "embeddings",
            &[self.class_ids.len(), self.dim()],
            &self.vectors.values(),
        );
    }

    pub fn read_from(ar: &Archive, class_ids: Vec<String>) -> Result<Self> {
        let (shape, data) = ar.get("embeddings")?;
        if shape.len() != 2 {
            return Err(Error::data("embedding tensor must be 2-D"));
        }
        let v = Array2::from_shape_vec((shape[0], shape[1]), data.to_vec())
            .map_err(|e| Error::data(e.to_string()))?;
        Self::from_parts(class_ids, v)
    }
}

/// The conditioning vector for a class: its stored embedding, unchanged.
pub fn encode_prompt(class_id: &str, table: &EmbeddingTable) -> Result<Vec<f32>> {
    table
        .index_of(class_id)
        .map(|i| table.vector(i))
        .ok_or_else(|| Error::data(format!("no embedding for class '{class_id}'")))
}

/// Sinusoidal timestep features of width `dim`.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = a.sin() as f32;
        out[half + i] = a.cos() as f32;
    }
    out
}

/// Assumed per-pixel standard deviation of clean images in [-1, 1]; sets the input scale.
const SIGMA_DATA: f64 = 0.5;

/// Noise level below which the skip path dominates the output. Smaller than
/// the data scale because the low-rank network cannot remove fine,
/// full-rank noise: below this level the input is passed through instead.
const SKIP_SIGMA: f64 = 0.2;

/// Preconditioning at noise level `alpha_bar`: the network sees `c_in * x_t`
/// and `eps = a * x_t - b * F`.
fn eps_coefficients(alpha_bar: f64) -> (f32, f32, f32) {
    let sigma2 = (1.0 - alpha_bar) / alpha_bar;
    let c_in = 1.0 / (alpha_bar.sqrt() * (sigma2 + SIGMA_DATA * SIGMA_DATA).sqrt());
    let s = sigma2 + SKIP_SIGMA * SKIP_SIGMA;
    let a = sigma2.sqrt() / (s * alpha_bar.sqrt());
    let b = SKIP_SIGMA / s.sqrt();
    (c_in as f32, a as f32, b as f32)
}

#[derive(Debug, Clone)]
struct Block {
    inner: Linear,
    outer: Linear,
    cond: Linear,
}

/// Residual MLP noise predictor `eps(x_t, t, c)` in pixel space.
///
/// `cond = embedding + timestep_features(t)` is projected and added into the
/// input layer and into every residual block. The MLP output `F` enters a
/// preconditioned denoiser `D = c_skip * x + c_out * F` on the rescaled input
/// `x = x_t / sqrt(alpha_bar)` (noise level `sigma^2 = (1 - ab) / ab`), and
/// the noise estimate is `eps = (x - D) / sigma`. The skip path carries the
/// full-rank part of `x_t`, so the hidden bottleneck only has to model image
/// structure, and every timestep's loss weight on `F` stays at most 1.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    cfg: DenoiserConfig,
    input: Linear,
    input_cond: Linear,
    blocks: Vec<Block>,
    output: Linear,
}

pub(crate) struct ForwardCache {
    x: Array2<f32>,
    cond: Array2<f32>,
    /// Residual stream before each block, then the final stream.
    streams: Vec<Array2<f32>>,
    /// Per block: inner pre-activation.
    inner_pre: Vec<Array2<f32>>,
    inner_act: Vec<Array2<f32>>,
    outer_in: Vec<Array2<f32>>,
    final_act: Array2<f32>,
}

impl DenoiserModel {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng: Rng = seed::rng(seed, "denoiser-init", 0);
        let d = cfg.pixels();
        let h = cfg.hidden;
        let e = cfg.embed_dim;
        let input = Linear::new(d, h, 1.0, &mut rng);
        let input_cond = Linear::new(e, h, 1.0, &mut rng);
        let blocks = (0..cfg.blocks)
            .map(|_| Block {
                inner: Linear::new(h, h, std::f32::consts::SQRT_2, &mut rng),
                outer: Linear::new(h, h, 0.1, &mut rng),
                cond: Linear::new(e, h, 1.0, &mut rng),
            })
            .collect();
        Ok(Self {
            cfg,
            input,
            input_cond,
            blocks,
            output: Linear::zeroed(h, d),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = Vec::new();
        v.extend(self.input.params());
        v.extend(self.input_cond.params());
        for b in &self.blocks {
            v.extend(b.inner.params());
            v.extend(b.outer.params());
            v.extend(b.cond.params());
        }
        v.extend(self.output.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = Vec::new();
        v.extend(self.input.params_mut());
        v.extend(self.input_cond.params_mut());
        for b in &mut self.blocks {
            v.extend(b.inner.params_mut());
            v.extend(b.outer.params_mut());
            v.extend(b.cond.params_mut());
        }
        v.extend(self.output.params_mut());
        v
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = vec![
            "input.w".into(),
            "input.b".into(),
            "input_cond.w".into(),
            "input_cond.b".into(),
        ];
        for i in 0..self.blocks.len() {
            for part in ["inner", "outer", "cond"] {
                names.push(format!("block{i}.{part}.w"));
                names.push(format!("block{i}.{part}.b"));
            }
        }
        names.extend(["output.w".into(), "output.b".into()]);
        names
    }

    /// Checksum of all parameter bit patterns.
    pub fn checksum(&self) -> String {
        crate::nn::param_checksum(self.params())
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    /// Conditioning rows: `embedding[label] + timestep_features(t)`.
    pub fn conditioning(
        &self,
        table: &EmbeddingTable,
        labels: &[usize],
        ts: &[usize],
    ) -> Array2<f32> {
        let e = self.cfg.embed_dim;
        let mut cond = Array2::zeros((labels.len(), e));
        for (i, (&l, &t)) in labels.iter().zip(ts).enumerate() {
            let tf = timestep_features(t, e);
            let emb = table.vectors().row(l);
            for (j, c) in cond.row_mut(i).iter_mut().enumerate() {
                *c = emb[j] + tf[j];
            }
        }
        cond
    }

    pub(crate) fn forward(
        &self,
        x: &ArrayView2<f32>,
        cond: &Array2<f32>,
    ) -> (Array2<f32>, ForwardCache) {
        let cv = cond.view();
        let mut h = self.input.forward(x);
        h += &self.input_cond.forward(&cv);
        let mut streams = Vec::with_capacity(self.blocks.len() + 1);
        let mut inner_pre = Vec::with_capacity(self.blocks.len());
        let mut inner_act = Vec::with_capacity(self.blocks.len());
        let mut outer_in = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let a = silu(&h);
            let mut u = b.inner.forward(&a.view());
            u += &b.cond.forward(&cv);
            let v = silu(&u);
            let w = b.outer.forward(&v.view());
            streams.push(h.clone());
            h += &w;
            inner_pre.push(u);
            inner_act.push(a);
            outer_in.push(v);
        }
        let final_act = silu(&h);
        let out = self.output.forward(&final_act.view());
        streams.push(h);
        (
            out,
            ForwardCache {
                x: x.to_owned(),
                cond: cond.clone(),
                streams,
                inner_pre,
                inner_act,
                outer_in,
                final_act,
            },
        )
    }

    /// Raw network output `F` for an already scaled input.
    pub fn predict(&self, x: &ArrayView2<f32>, cond: &Array2<f32>) -> Array2<f32> {
        self.forward(x, cond).0
    }

    /// Noise estimate for rows of `x_t` with per-row `alpha_bars`.
    pub fn predict_eps(
        &self,
        x_t: &ArrayView2<f32>,
        cond: &Array2<f32>,
        alpha_bars: &[f64],
    ) -> Array2<f32> {
        self.forward_eps(x_t, cond, alpha_bars).0
    }

    pub(crate) fn forward_eps(
        &self,
        x_t: &ArrayView2<f32>,
        cond: &Array2<f32>,
        alpha_bars: &[f64],
    ) -> (Array2<f32>, ForwardCache) {
        let mut input = x_t.to_owned();
        for (i, mut row) in input.rows_mut().into_iter().enumerate() {
            let (c_in, _, _) = eps_coefficients(alpha_bars[i]);
            row.mapv_inplace(|v| c_in * v);
        }
        let (f, cache) = self.forward(&input.view(), cond);
        let mut eps = f;
        for (i, mut row) in eps.rows_mut().into_iter().enumerate() {
            let (_, a, b) = eps_coefficients(alpha_bars[i]);
            let xr = x_t.row(i);
            for (e, &x) in row.iter_mut().zip(xr.iter()) {
                *e = a * x - b * *e;
            }
        }
        (eps, cache)
    }

    /// Backward pass for [`Self::forward_eps`].
    pub(crate) fn backward_eps(
        &mut self,
        cache: &ForwardCache,
        deps: &Array2<f32>,
        alpha_bars: &[f64],
        param_grads: bool,
    ) -> Array2<f32> {
        let mut df = deps.clone();
        for (i, mut row) in df.rows_mut().into_iter().enumerate() {
            let (_, _, b) = eps_coefficients(alpha_bars[i]);
            row.mapv_inplace(|g| -b * g);
        }
        self.backward(cache, &df, param_grads)
    }

    /// Backpropagate `dout`; returns the gradient with respect to `cond`.
    /// With `param_grads = false` the weights' gradients are left untouched.
    pub(crate) fn backward(
        &mut self,
        cache: &ForwardCache,
        dout: &Array2<f32>,
        param_grads: bool,
    ) -> Array2<f32> {
        let cv = cache.cond.view();
        let last = cache.streams.last().expect("final stream");
        let dfa = self
            .output
            .backward(&cache.final_act.view(), dout, param_grads);
        let mut dh = silu_backward(last, &dfa);
        let mut dcond = Array2::zeros(cache.cond.raw_dim());
        for (i, b) in self.blocks.iter_mut().enumerate().rev() {
            let dv = b
                .outer
                .backward(&cache.outer_in[i].view(), &dh, param_grads);
            let du = silu_backward(&cache.inner_pre[i], &dv);
            dcond += &b.cond.backward(&cv, &du, param_grads);
            let da = b
                .inner
                .backward(&cache.inner_act[i].view(), &du, param_grads);
            dh += &silu_backward(&cache.streams[i], &da);
        }
        dcond += &self.input_cond.backward(&cv, &dh, param_grads);
        if param_grads {
            // Input-layer gradient w.r.t. x is not needed.
            ndarray::linalg::general_mat_mul(1.0, &cache.x.t(), &dh, 1.0, &mut self.input.w.grad);
            self.input.b.grad += &dh.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
        }
        dcond
    }

    pub fn write_to(&self, ar: &mut Archive) {
        for (name, p) in self.param_names().into_iter().zip(self.params()) {
            ar.push(format!("denoiser.{name}"), &p.shape(), &p.values());
        }
    }

    pub fn read_from(ar: &Archive, cfg: DenoiserConfig) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        let names = m.param_names();
        for (name, p) in names.into_iter().zip(m.params_mut()) {
            let data = ar.get_shaped(&format!("denoiser.{name}"), &p.shape())?;
            p.load(data);
        }
        if !m.is_finite() {
            return Err(Error::data(
                "denoiser checkpoint contains non-finite parameters",
            ));
        }
        Ok(m)
    }
}
