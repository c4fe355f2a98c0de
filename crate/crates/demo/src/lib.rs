//! Browser bindings for three small pieces of the pipeline: toy image
//! rendering, the forward noising process and top-k ranking.
//!
//! Images cross the boundary as RGBA bytes ready for `ImageData`; seeds are
//! `u32` so JavaScript can pass plain numbers.

use rand_distr::{Distribution, StandardNormal};
use wasm_bindgen::prelude::*;

use diffaug::evaluation::rank_of;
use diffaug::generator::schedule::{forward_noise, NoiseSchedule};
use diffaug::image::Image;
use diffaug::seed;
use diffaug::taxonomy::ClassTaxonomy;
use diffaug::toy::render_toy_image;

const MAX_SIZE: usize = 128;

fn rgba(img: &Image) -> Vec<u8> {
    img.data
        .chunks_exact(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect()
}

fn toy(class_index: usize, seed: u32, size: usize) -> Image {
    let mut rng = seed::rng(seed.into(), "demo-toy", class_index as u64);
    render_toy_image(class_index, size.clamp(4, MAX_SIZE), &mut rng)
}

fn schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule, JsError> {
    NoiseSchedule::linear(steps, beta_start, beta_end).map_err(|e| JsError::new(&e.to_string()))
}

/// Display names of the six toy classes, in index order.
#[wasm_bindgen]
pub fn class_names() -> Vec<String> {
    ClassTaxonomy::skin_default()
        .classes()
        .iter()
        .map(|c| c.display_name.clone())
        .collect()
}

/// One toy image of the given class as `size * size * 4` RGBA bytes.
#[wasm_bindgen]
pub fn render_toy(class_index: usize, seed: u32, size: usize) -> Vec<u8> {
    rgba(&toy(class_index, seed, size))
}

/// The same toy image pushed to timestep `t` of a linear schedule.
#[wasm_bindgen]
pub fn noised_toy(
    class_index: usize,
    seed: u32,
    size: usize,
    t: usize,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<Vec<u8>, JsError> {
    let s = schedule(steps, beta_start, beta_end)?;
    let img = toy(class_index, seed, size);
    let x0 = img.to_signed();
    let mut rng = seed::rng(seed.into(), "demo-noise", class_index as u64);
    let eps: Vec<f32> = (0..x0.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let xt = forward_noise(&x0, t, &eps, &s).map_err(|e| JsError::new(&e.to_string()))?;
    Ok(rgba(&Image::from_signed(img.width, img.height, &xt)))
}

/// `alpha_bar_t` for `t = 1..=steps`.
#[wasm_bindgen]
pub fn alpha_bar_curve(steps: usize, beta_start: f64, beta_end: f64) -> Result<Vec<f64>, JsError> {
    let s = schedule(steps, beta_start, beta_end)?;
    Ok((1..=steps).map(|t| s.alpha_bar(t)).collect())
}

/// Class indices from highest to lowest score; ties keep the lower index first.
#[wasm_bindgen]
pub fn ranking(scores: Vec<f64>) -> Vec<usize> {
    let mut order = vec![0; scores.len()];
    for i in 0..scores.len() {
        order[rank_of(&scores, i)] = i;
    }
    order
}

/// Whether `label` is among the `k` best-scored classes.
#[wasm_bindgen]
pub fn in_top_k(scores: Vec<f64>, label: usize, k: usize) -> bool {
    label < scores.len() && rank_of(&scores, label) < k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_bytes_are_opaque_rgba() {
        let px = render_toy(2, 7, 16);
        assert_eq!(px.len(), 16 * 16 * 4);
        assert!(px.chunks(4).all(|p| p[3] == 255));
        assert_eq!(px, render_toy(2, 7, 16));
    }

    #[test]
    fn last_step_is_mostly_noise() {
        let clean = render_toy(0, 1, 16);
        let noisy = noised_toy(0, 1, 16, 200, 200, 5e-4, 0.1).unwrap();
        let diff: f64 = clean
            .iter()
            .zip(&noisy)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>()
            / clean.len() as f64;
        assert!(diff > 30.0, "{diff}");
    }

    #[test]
    fn curve_decreases() {
        let c = alpha_bar_curve(50, 1e-4, 0.02).unwrap();
        assert_eq!(c.len(), 50);
        assert!(c.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn ranking_orders_and_breaks_ties_low() {
        assert_eq!(ranking(vec![0.1, 0.4, 0.4, 0.1]), vec![1, 2, 0, 3]);
        assert!(in_top_k(vec![0.1, 0.4, 0.4, 0.1], 2, 2));
        assert!(!in_top_k(vec![0.1, 0.4, 0.4, 0.1], 3, 3));
    }
}
