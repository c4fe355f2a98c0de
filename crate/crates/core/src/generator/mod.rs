//! Class-conditional pixel-space diffusion generator.
//!
//! Three parts mirror a text-to-image pipeline: an embedding table stands in
//! for the text encoder (one learned vector per class), a conditional noise
//! predictor does the denoising, and an identity [`Decoder`] maps the result
//! to pixels.

pub mod denoiser;
pub mod sample;
pub mod schedule;
pub mod train;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use denoiser::{encode_prompt, DenoiserConfig, DenoiserModel, EmbeddingTable};
pub use sample::{image_seed, sample, sample_with, Decoder, IdentityDecoder, SamplerOptions};
pub use schedule::{forward_noise, NoiseSchedule, ScheduleConfig};
pub use train::{train_denoiser, train_embeddings, GeneratorTrainConfig, LossCurve};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::manifest::{ImageRecord, Manifest, Provenance, Source};
use crate::seed;
use crate::taxonomy::ClassTaxonomy;

const CHECKPOINT_KIND: &str = "generator";

/// Trained generator: schedule, denoiser weights, embeddings and a config echo.
#[derive(Debug, Clone)]
pub struct GeneratorCheckpoint {
    pub schedule: ScheduleConfig,
    pub taxonomy: ClassTaxonomy,
    pub model: DenoiserModel,
    pub table: EmbeddingTable,
    pub echo: Value,
}

impl GeneratorCheckpoint {
    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    pub fn to_archive(&self) -> Archive {
        let mut ar = Archive::new(
            CHECKPOINT_KIND,
            json!({
                "schedule": self.schedule,
                "denoiser": self.model.config(),
                "taxonomy": self.taxonomy,
                "embedding_classes": self.table.class_ids(),
                "config": self.echo,
            }),
        );
        self.model.write_to(&mut ar);
        self.table.write_to(&mut ar);
        ar
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        let meta = &ar.meta;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::data(format!("generator checkpoint lacks '{k}'")))
        };
        let parse_err =
            |e: serde_json::Error| Error::data(format!("bad generator checkpoint metadata: {e}"));
        let schedule: ScheduleConfig =
            serde_json::from_value(field("schedule")?).map_err(parse_err)?;
        let cfg: DenoiserConfig = serde_json::from_value(field("denoiser")?).map_err(parse_err)?;
        let taxonomy: ClassTaxonomy =
            serde_json::from_value(field("taxonomy")?).map_err(parse_err)?;
        let classes: Vec<String> =
            serde_json::from_value(field("embedding_classes")?).map_err(parse_err)?;
        Ok(Self {
            schedule,
            taxonomy,
            model: DenoiserModel::read_from(ar, cfg)?,
            table: EmbeddingTable::read_from(ar, classes)?,
            echo: meta.get("config").cloned().unwrap_or(Value::Null),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?.expect_kind(CHECKPOINT_KIND)?)
    }
}

/// One generation job (the JSON generation config).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorRun {
    pub run_id: String,
    pub seed: u64,
    /// Images requested per class. The full-scale setting is 30000 per class;
    /// desk runs use a few hundred.
    pub per_class_counts: BTreeMap<String, usize>,
    pub sampler_steps: usize,
    pub out_dir: PathBuf,
}

impl GeneratorRun {
    pub fn uniform(
        run_id: &str,
        seed: u64,
        taxonomy: &ClassTaxonomy,
        per_class: usize,
        sampler_steps: usize,
        out_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            run_id: run_id.into(),
            seed,
            per_class_counts: taxonomy.ids().map(|c| (c.to_string(), per_class)).collect(),
            sampler_steps,
            out_dir: out_dir.into(),
        }
    }

    pub fn validate(&self, taxonomy: &ClassTaxonomy) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::config(format!("invalid run_id '{}'", self.run_id)));
        }
        if let Some(c) = self
            .per_class_counts
            .keys()
            .find(|c| taxonomy.index_of(c).is_none())
        {
            return Err(Error::config(format!(
                "generation config names unknown class '{c}'"
            )));
        }
        Ok(())
    }
}

/// Sample every requested class, write PNGs under
/// `<out_dir>/<run_id>/<class_id>/<index>.png` and return a synthetic-source
/// manifest rooted at `out_dir`, ordered by (class, index).
pub fn generate_to_manifest(run: &GeneratorRun, ckpt: &GeneratorCheckpoint) -> Result<Manifest> {
    run.validate(&ckpt.taxonomy)?;
    let schedule = ckpt.noise_schedule()?;
    if run.sampler_steps != schedule.steps() {
        return Err(Error::config(format!(
            "sampler_steps {} must equal the schedule's {} steps",
            run.sampler_steps,
            schedule.steps()
        )));
    }
    let total: usize = run.per_class_counts.values().sum();
    let mut m = Manifest::new(ckpt.taxonomy.clone(), "generate");
    m.base_dir = run.out_dir.clone();
    for class in ckpt.taxonomy.classes() {
        let n = run
            .per_class_counts
            .get(&class.class_id)
            .copied()
            .unwrap_or(0);
        if n == 0 {
            continue;
        }
        let class_seed = seed::derive(run.seed, &format!("generate/{}", class.class_id), 0);
        let images = sample(
            &ckpt.model,
            &ckpt.table,
            &schedule,
            &class.class_id,
            n,
            class_seed,
        )?;
        for (i, img) in images.iter().enumerate() {
            let rel = format!("{}/{}/{i:05}.png", run.run_id, class.class_id);
            img.save_png(run.out_dir.join(&rel))
                .map_err(|e| Error::Partial {
                    done: m.len(),
                    total,
                    source: Box::new(e),
                })?;
            m.records.push(ImageRecord {
                record_id: format!("{}/{}/{i:05}", run.run_id, class.class_id),
                image_path: rel,
                label: class.class_id.clone(),
                source: Source::Synthetic,
                split: None,
                provenance: Some(Provenance {
                    generator_run_id: Some(run.run_id.clone()),
                    seed: Some(image_seed(class_seed, i)),
                    prompt: Some(class.display_name.clone()),
                    sampler_steps: Some(run.sampler_steps),
                    ..Default::default()
                }),
                filter_scores: None,
                extra: Default::default(),
            });
        }
    }
    Ok(m)
}
