//! Ancestral reverse diffusion.

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

use super::denoiser::{encode_prompt, DenoiserModel, EmbeddingTable};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;

/// Images sampled together in one batch. Fixed so results do not depend on
/// how many workers run.
pub const SAMPLE_CHUNK: usize = 64;

/// Maps the denoised representation to pixel values in [-1, 1].
pub trait Decoder: Sync {
    fn decode(&self, latent: &[f32]) -> Vec<f32>;
}

/// The toy model denoises directly in pixel space.
pub struct IdentityDecoder;

impl Decoder for IdentityDecoder {
    fn decode(&self, latent: &[f32]) -> Vec<f32> {
        latent.to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerOptions {
    /// Clamp the predicted clean image to [-1, 1] before forming the posterior mean.
    pub clip_denoised: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            clip_denoised: true,
        }
    }
}

/// Seed of image `index` in a sampling call with seed `seed`.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    seed::derive(seed, "sample-image", index as u64)
}

/// Draw `n` images of `class_id` by ancestral sampling with `sigma_t^2 = beta_t`,
/// starting from pure noise. Image `i` uses its own noise stream
/// [`image_seed`]`(seed, i)`.
pub fn sample(
    model: &DenoiserModel,
    table: &EmbeddingTable,
    schedule: &NoiseSchedule,
    class_id: &str,
    n: usize,
    seed: u64,
) -> Result<Vec<Image>> {
    sample_with(
        model,
        table,
        schedule,
        class_id,
        n,
        seed,
        SamplerOptions::default(),
        &IdentityDecoder,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn sample_with(
    model: &DenoiserModel,
    table: &EmbeddingTable,
    schedule: &NoiseSchedule,
    class_id: &str,
    n: usize,
    seed: u64,
    opts: SamplerOptions,
    decoder: &dyn Decoder,
) -> Result<Vec<Image>> {
    encode_prompt(class_id, table)?;
    let label = table.index_of(class_id).expect("checked by encode_prompt");
    let seeds: Vec<u64> = (0..n).map(|i| image_seed(seed, i)).collect();
    let chunks: Vec<&[u64]> = seeds.chunks(SAMPLE_CHUNK).collect();
    let run = |c: &&[u64]| sample_chunk(model, table, schedule, label, c, opts, decoder);
    #[cfg(feature = "parallel")]
    let parts: Vec<Vec<Image>> = {
        use rayon::prelude::*;
        chunks.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Vec<Image>> = chunks.iter().map(run).collect();
    let images: Vec<Image> = parts.into_iter().flatten().collect();
    if images.iter().any(|im| im.len() != model.config().pixels()) {
        return Err(Error::data("decoder produced an image of the wrong size"));
    }
    Ok(images)
}

fn sample_chunk(
    model: &DenoiserModel,
    table: &EmbeddingTable,
    schedule: &NoiseSchedule,
    label: usize,
    seeds: &[u64],
    opts: SamplerOptions,
    decoder: &dyn Decoder,
) -> Vec<Image> {
    let cfg = *model.config();
    let d = cfg.pixels();
    let n = seeds.len();
    let mut rngs: Vec<seed::Rng> = seeds.iter().map(|&s| seed::rng(s, "noise", 0)).collect();
    let mut x = Array2::zeros((n, d));
    for (i, rng) in rngs.iter_mut().enumerate() {
        for v in x.row_mut(i) {
            *v = StandardNormal.sample(rng);
        }
    }
    let labels = vec![label; n];
    for t in (1..=schedule.steps()).rev() {
        let cond = model.conditioning(table, &labels, &vec![t; n]);
        let ab = schedule.alpha_bar(t);
        let eps = model.predict_eps(&x.view(), &cond, &vec![ab; n]);
        let beta = schedule.beta(t);
        let alpha = schedule.alpha(t);
        let ab_prev = schedule.alpha_bar(t - 1);
        // Posterior mean written through the predicted clean image:
        // mean = c0 * x0_hat + ct * x_t.
        let c0 = (ab_prev.sqrt() * beta / (1.0 - ab)) as f32;
        let ct = (alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab)) as f32;
        let inv_sqrt_ab = (1.0 / ab.sqrt()) as f32;
        let sqrt_one_minus_ab = ((1.0 - ab).sqrt()) as f32;
        let sigma = beta.sqrt() as f32;
        for (i, rng) in rngs.iter_mut().enumerate() {
            let mut row = x.row_mut(i);
            let e = eps.row(i);
            for j in 0..d {
                let xt = row[j];
                let mut x0 = (xt - sqrt_one_minus_ab * e[j]) * inv_sqrt_ab;
                if opts.clip_denoised {
                    x0 = x0.clamp(-1.0, 1.0);
                }
                let mut next = c0 * x0 + ct * xt;
                if t > 1 {
                    let z: f32 = StandardNormal.sample(rng);
                    next += sigma * z;
                }
                row[j] = next;
            }
        }
    }
    x.rows()
        .into_iter()
        .map(|row| {
            Image::from_signed(
                cfg.width,
                cfg.height,
                &decoder.decode(row.as_slice().expect("contiguous row")),
            )
        })
        .collect()
}
