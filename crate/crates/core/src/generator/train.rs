//! Denoiser training and embedding-only (textual inversion) training.

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::denoiser::{DenoiserConfig, DenoiserModel, EmbeddingTable};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::manifest::Manifest;
use crate::nn::{clip_grad_norm, Optimizer, OptimizerConfig, Param};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorTrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub lr: f32,
    pub batch_size: usize,
    #[serde(default = "default_clip")]
    pub clip_norm: f32,
    /// EMA factor for the smoothed loss curve.
    #[serde(default = "default_smoothing")]
    pub smoothing: f32,
    /// Draw timestep `t` with weight `min(1, gamma / snr(t))`; `None` draws uniformly.
    #[serde(default = "default_gamma")]
    pub t_weight_gamma: Option<f64>,
}

fn default_gamma() -> Option<f64> {
    Some(5.0)
}

fn default_clip() -> f32 {
    1.0
}

fn default_smoothing() -> f32 {
    0.98
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            lr: 1e-3,
            batch_size: 64,
            clip_norm: default_clip(),
            smoothing: default_smoothing(),
            t_weight_gamma: default_gamma(),
        }
    }
}

impl GeneratorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.smoothing)
            || !(self.clip_norm > 0.0)
            || self.t_weight_gamma.is_some_and(|g| !(g > 0.0))
        {
            return Err(Error::config(format!(
                "invalid generator training config {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub raw: Vec<f32>,
    pub smoothed: Vec<f32>,
}

impl LossCurve {
    fn push(&mut self, loss: f32, factor: f32) {
        let s = match self.smoothed.last() {
            Some(prev) => factor * prev + (1.0 - factor) * loss,
            None => loss,
        };
        self.raw.push(loss);
        self.smoothed.push(s);
    }

    pub fn first_smoothed(&self) -> Option<f32> {
        self.smoothed.first().copied()
    }

    pub fn last_smoothed(&self) -> Option<f32> {
        self.smoothed.last().copied()
    }
}

/// Images of a manifest in [-1, 1] with their taxonomy indices.
pub struct DiffusionData {
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl DiffusionData {
    pub fn load(m: &Manifest, height: usize, width: usize) -> Result<Self> {
        if m.is_empty() {
            return Err(Error::data("generator training manifest is empty"));
        }
        let mut images = Vec::with_capacity(m.len());
        let mut labels = Vec::with_capacity(m.len());
        for r in &m.records {
            images.push(Image::load_sized(m.image_path(r), width, height)?.to_signed());
            labels.push(m.taxonomy.require_index(&r.label)?);
        }
        Ok(Self { images, labels })
    }
}

struct Batch {
    x_t: Array2<f32>,
    eps: Array2<f32>,
    labels: Vec<usize>,
    ts: Vec<usize>,
    alpha_bars: Vec<f64>,
}

fn timestep_sampler(schedule: &NoiseSchedule, gamma: Option<f64>) -> WeightedIndex<f64> {
    let weights: Vec<f64> = (1..=schedule.steps())
        .map(|t| {
            let ab = schedule.alpha_bar(t);
            gamma.map_or(1.0, |g| (g * (1.0 - ab) / ab).min(1.0))
        })
        .collect();
    WeightedIndex::new(&weights).expect("positive timestep weights")
}

fn draw_batch(
    data: &DiffusionData,
    schedule: &NoiseSchedule,
    ts_dist: &WeightedIndex<f64>,
    batch: usize,
    rng: &mut seed::Rng,
) -> Batch {
    let d = data.images[0].len();
    let mut x_t = Array2::zeros((batch, d));
    let mut eps = Array2::zeros((batch, d));
    let mut labels = Vec::with_capacity(batch);
    let mut ts = Vec::with_capacity(batch);
    for i in 0..batch {
        let k = rng.random_range(0..data.images.len());
        let t = 1 + ts_dist.sample(rng);
        let ab = schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let x0 = &data.images[k];
        let mut row_x = x_t.row_mut(i);
        let mut row_e = eps.row_mut(i);
        for j in 0..d {
            let e: f32 = StandardNormal.sample(rng);
            row_e[j] = e;
            row_x[j] = a * x0[j] + b * e;
        }
        labels.push(data.labels[k]);
        ts.push(t);
    }
    let alpha_bars = ts.iter().map(|&t| schedule.alpha_bar(t)).collect();
    Batch {
        x_t,
        eps,
        labels,
        ts,
        alpha_bars,
    }
}

fn check_loss(loss: f32, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite denoising loss {loss} at step {step}"
        )));
    }
    Ok(())
}

/// Jointly train denoiser weights and class embeddings on the epsilon-prediction MSE.
pub fn train_denoiser(
    train: &Manifest,
    schedule: &NoiseSchedule,
    model_cfg: DenoiserConfig,
    cfg: &GeneratorTrainConfig,
) -> Result<(DenoiserModel, EmbeddingTable, LossCurve)> {
    cfg.validate()?;
    let data = DiffusionData::load(train, model_cfg.height, model_cfg.width)?;
    let mut model = DenoiserModel::new(model_cfg, seed::derive(cfg.seed, "denoiser", 0))?;
    let mut table = EmbeddingTable::init(
        &train.taxonomy,
        model_cfg.embed_dim,
        seed::derive(cfg.seed, "embeddings", 0),
    );
    let curve = fit_denoiser(&data, schedule, &mut model, &mut table, cfg)?;
    Ok((model, table, curve))
}

/// Continue joint training of an existing model on preloaded data.
pub fn fit_denoiser(
    data: &DiffusionData,
    schedule: &NoiseSchedule,
    model: &mut DenoiserModel,
    table: &mut EmbeddingTable,
    cfg: &GeneratorTrainConfig,
) -> Result<LossCurve> {
    let mut rng = seed::rng(cfg.seed, "denoiser-batches", 0);
    let mut opt = Optimizer::new(OptimizerConfig::adam(cfg.lr));
    let mut curve = LossCurve::default();
    let ts_dist = timestep_sampler(schedule, cfg.t_weight_gamma);
    for step in 0..cfg.steps {
        let b = draw_batch(data, schedule, &ts_dist, cfg.batch_size, &mut rng);
        let cond = model.conditioning(table, &b.labels, &b.ts);
        let (pred, cache) = model.forward_eps(&b.x_t.view(), &cond, &b.alpha_bars);
        let (loss, dpred) = crate::nn::layers::mse(&pred, &b.eps.view());
        check_loss(loss, step)?;
        let dcond = model.backward_eps(&cache, &dpred, &b.alpha_bars, true);
        accumulate_embedding_grad(table.param_mut(), &dcond, &b.labels);
        let mut params = model.params_mut();
        params.push(table.param_mut());
        clip_grad_norm(&mut params, cfg.clip_norm);
        opt.step(&mut params);
        curve.push(loss, cfg.smoothing);
    }
    if !model.is_finite() || !table.is_finite() {
        return Err(Error::Divergence(
            "denoiser parameters became non-finite".into(),
        ));
    }
    Ok(curve)
}

fn accumulate_embedding_grad(p: &mut Param, dcond: &Array2<f32>, labels: &[usize]) {
    for (i, &l) in labels.iter().enumerate() {
        let mut g = p.grad.row_mut(l);
        g += &dcond.row(i);
    }
}

/// Optimize only the embedding vectors against a frozen denoiser.
///
/// Classes present in `train` get updated; the denoiser is never modified.
/// `init` must cover every class of `train`'s taxonomy (use
/// [`EmbeddingTable::extended`] to add new classes).
pub fn train_embeddings(
    frozen: &DenoiserModel,
    init: &EmbeddingTable,
    train: &Manifest,
    schedule: &NoiseSchedule,
    cfg: &GeneratorTrainConfig,
) -> Result<(EmbeddingTable, LossCurve)> {
    cfg.validate()?;
    let mc = frozen.config();
    if init.dim() != mc.embed_dim {
        return Err(Error::config(format!(
            "embedding dim {} does not match denoiser embed_dim {}",
            init.dim(),
            mc.embed_dim
        )));
    }
    let data = DiffusionData::load(train, mc.height, mc.width)?;
    // Map manifest taxonomy indices onto table rows.
    let rows: Vec<usize> = train
        .taxonomy
        .ids()
        .map(|c| {
            init.index_of(c).ok_or_else(|| {
                Error::config(format!("embedding table has no entry for class '{c}'"))
            })
        })
        .collect::<Result<_>>()?;
    let data = DiffusionData {
        labels: data.labels.iter().map(|&l| rows[l]).collect(),
        images: data.images,
    };
    // Work on a private copy so the caller's model is untouched even on error.
    let mut model = frozen.clone();
    let mut table = init.clone();
    let mut rng = seed::rng(cfg.seed, "embedding-batches", 0);
    let mut opt = Optimizer::new(OptimizerConfig::adam(cfg.lr));
    let mut curve = LossCurve::default();
    let ts_dist = timestep_sampler(schedule, cfg.t_weight_gamma);
    for step in 0..cfg.steps {
        let b = draw_batch(&data, schedule, &ts_dist, cfg.batch_size, &mut rng);
        let cond = model.conditioning(&table, &b.labels, &b.ts);
        let (pred, cache) = model.forward_eps(&b.x_t.view(), &cond, &b.alpha_bars);
        let (loss, dpred) = crate::nn::layers::mse(&pred, &b.eps.view());
        check_loss(loss, step)?;
        let dcond = model.backward_eps(&cache, &dpred, &b.alpha_bars, false);
        accumulate_embedding_grad(table.param_mut(), &dcond, &b.labels);
        let p = table.param_mut();
        clip_grad_norm(&mut [&mut *p], cfg.clip_norm);
        opt.step(&mut [p]);
        curve.push(loss, cfg.smoothing);
    }
    if !table.is_finite() {
        return Err(Error::Divergence(
            "embedding vectors became non-finite".into(),
        ));
    }
    Ok((table, curve))
}
