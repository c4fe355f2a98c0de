//! Procedural toy dataset: six visually separable classes of "lesion" images.
//!
//! Each class has its own blob colour, blob count and stripe frequency,
//! rendered over a jittered skin-tone background.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::manifest::{ImageRecord, Manifest};
use crate::seed::{self, Rng};
use crate::taxonomy::ClassTaxonomy;

#[derive(Debug, Clone, Copy)]
struct ClassStyle {
    color: [f32; 3],
    blobs: usize,
    stripe_freq: f32,
}

const STYLES: [ClassStyle; 6] = [
    ClassStyle {
        color: [0.55, 0.33, 0.12],
        blobs: 1,
        stripe_freq: 0.0,
    },
    ClassStyle {
        color: [0.88, 0.78, 0.30],
        blobs: 2,
        stripe_freq: 1.0,
    },
    ClassStyle {
        color: [0.85, 0.20, 0.22],
        blobs: 3,
        stripe_freq: 2.0,
    },
    ClassStyle {
        color: [0.40, 0.18, 0.50],
        blobs: 1,
        stripe_freq: 3.0,
    },
    ClassStyle {
        color: [0.95, 0.55, 0.80],
        blobs: 2,
        stripe_freq: 0.5,
    },
    ClassStyle {
        color: [0.10, 0.10, 0.18],
        blobs: 3,
        stripe_freq: 1.5,
    },
];

const SKIN: [f32; 3] = [0.86, 0.68, 0.57];

/// Render one image of class `class_index` (0..6).
pub fn render_toy_image(class_index: usize, size: usize, rng: &mut Rng) -> Image {
    let style = STYLES[class_index % STYLES.len()];
    let jitter = Normal::new(0.0f32, 0.03).expect("valid normal");
    let bg: Vec<f32> = SKIN.iter().map(|c| c + jitter.sample(rng)).collect();
    let fg: Vec<f32> = style.color.iter().map(|c| c + jitter.sample(rng)).collect();
    let s = size as f32;
    let blobs: Vec<(f32, f32, f32)> = (0..style.blobs)
        .map(|_| {
            let r = rng.random_range(0.14..0.22) * s;
            let cx = rng.random_range(r..s - r);
            let cy = rng.random_range(r..s - r);
            (cx, cy, r)
        })
        .collect();
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let pixel_noise = Normal::new(0.0f32, 0.03).expect("valid normal");
    let mut values = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            // Soft-edged coverage by the union of blobs.
            let cover = blobs
                .iter()
                .map(|&(cx, cy, r)| {
                    let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
                    (1.0 - (d - r + 1.0) / 2.0).clamp(0.0, 1.0)
                })
                .fold(0.0f32, f32::max);
            let stripe = 1.0
                - 0.35
                    * (0.5
                        + 0.5 * (style.stripe_freq * std::f32::consts::TAU * px / s + phase).sin());
            for c in 0..3 {
                let v = bg[c] * (1.0 - cover) + fg[c] * stripe * cover + pixel_noise.sample(rng);
                values.push(v.clamp(0.0, 1.0) * 2.0 - 1.0);
            }
        }
    }
    Image::from_signed(size, size, &values)
}

/// Out-of-domain image: uniform noise or a smooth random colour field.
pub fn render_out_of_domain(size: usize, rng: &mut Rng) -> Image {
    let mut values = Vec::with_capacity(size * size * 3);
    if rng.random_bool(0.5) {
        for _ in 0..size * size * 3 {
            values.push(rng.random_range(-1.0f32..=1.0));
        }
    } else {
        let corners: Vec<[f32; 3]> = (0..4)
            .map(|_| {
                [
                    rng.random_range(-1.0..=1.0),
                    rng.random_range(-1.0..=1.0),
                    rng.random_range(-1.0..=1.0),
                ]
            })
            .collect();
        let denom = (size.max(2) - 1) as f32;
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (x as f32 / denom, y as f32 / denom);
                for c in 0..3 {
                    let top = corners[0][c] * (1.0 - u) + corners[1][c] * u;
                    let bot = corners[2][c] * (1.0 - u) + corners[3][c] * u;
                    values.push(top * (1.0 - v) + bot * v);
                }
            }
        }
    }
    Image::from_signed(size, size, &values)
}

#[derive(Debug, Clone)]
pub struct ToySpec {
    pub per_class: usize,
    pub seed: u64,
    pub size: usize,
    /// Record-id prefix; lets several toy sets coexist without id clashes.
    pub prefix: String,
}

/// Render `per_class` images for each taxonomy class into `out_dir` and write
/// `out_dir/manifest.jsonl` (real source). Output is a pure function of the spec.
pub fn make_toy_dataset(
    out_dir: impl AsRef<Path>,
    spec: &ToySpec,
    taxonomy: &ClassTaxonomy,
) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    if spec.per_class == 0 {
        return Err(Error::config("toy dataset needs per_class >= 1"));
    }
    if spec.size < 4 {
        return Err(Error::config("toy images must be at least 4x4"));
    }
    let mut m = Manifest::new(taxonomy.clone(), "make-toy");
    m.base_dir = out_dir.to_path_buf();
    for (ci, class) in taxonomy.ids().enumerate() {
        for i in 0..spec.per_class {
            let mut rng = seed::rng(spec.seed, &format!("toy/{class}"), i as u64);
            let img = render_toy_image(ci, spec.size, &mut rng);
            let rel = format!("images/{class}/{i:05}.png");
            img.save_png(out_dir.join(&rel))?;
            m.records.push(ImageRecord::real(
                format!("{}/{class}/{i:05}", spec.prefix),
                rel,
                class,
            ));
        }
    }
    m.save(out_dir.join("manifest.jsonl"))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_differ_in_mean_colour() {
        let means: Vec<[f32; 3]> = (0..6)
            .map(|c| {
                let mut acc = [0.0f32; 3];
                for i in 0..20 {
                    let img = render_toy_image(c, 16, &mut seed::rng(1, "t", (c * 100 + i) as u64));
                    for p in img.data.chunks_exact(3) {
                        for k in 0..3 {
                            acc[k] += p[k] as f32;
                        }
                    }
                }
                acc
            })
            .collect();
        for a in 0..6 {
            for b in a + 1..6 {
                let d: f32 = (0..3).map(|k| (means[a][k] - means[b][k]).abs()).sum();
                assert!(d > 0.0);
            }
        }
    }

    #[test]
    fn one_per_class_writes_six_images() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec {
            per_class: 1,
            seed: 3,
            size: 8,
            prefix: "toy".into(),
        };
        let m = make_toy_dataset(dir.path(), &spec, &ClassTaxonomy::skin_default()).unwrap();
        assert_eq!(m.len(), 6);
        assert!(m.class_counts(None).iter().all(|(_, n)| n == 1));
        for r in &m.records {
            assert_eq!(Image::load_png(m.image_path(r)).unwrap().width, 8);
        }
        let loaded = Manifest::load(dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(loaded, m);
    }
}
