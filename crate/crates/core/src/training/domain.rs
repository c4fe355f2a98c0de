//! Binary in-domain scorer: real images against procedurally rendered
//! out-of-domain images (noise fields and smooth colour gradients).

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::Deserialize;
use serde_json::json;

use super::{
    fit, Classifier, ClassifierTrainer, Dataset, History, NormalizationStats, TrainConfig,
};
use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::manifest::Manifest;
use crate::scoring::{map_chunks, DomainScorer, SCORE_CHUNK};
use crate::seed;
use crate::toy::render_out_of_domain;

const CHECKPOINT_KIND: &str = "domain-scorer";
const IN_DOMAIN: usize = 1;

#[derive(Debug, Clone)]
pub struct DomainModel {
    pub stats: NormalizationStats,
    pub classifier: Classifier,
    pub history: History,
    pub config: TrainConfig,
}

/// Train the first configured architecture to separate `real` images from
/// an equal number of rendered out-of-domain images.
pub fn train_domain_scorer(real: &Manifest, cfg: &TrainConfig) -> Result<DomainModel> {
    cfg.validate()?;
    if real.len() < 2 {
        return Err(Error::data(
            "the domain scorer needs at least 2 real images",
        ));
    }
    let size = cfg.image_size;
    let positives: Vec<Image> = map_chunks(&real.records, SCORE_CHUNK, |rs| {
        rs.iter()
            .map(|r| Image::load_sized(real.image_path(r), size, size))
            .collect()
    })?;
    let negatives: Vec<Image> = (0..positives.len())
        .map(|i| render_out_of_domain(size, &mut seed::rng(cfg.seed, "out-of-domain", i as u64)))
        .collect();
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (label, n) in [(0usize, negatives.len()), (IN_DOMAIN, positives.len())] {
        let mut idx: Vec<(usize, usize)> = (0..n).map(|i| (label, i)).collect();
        idx.shuffle(&mut seed::rng(cfg.seed, "domain-split", label as u64));
        let cut = crate::split::train_count(n, cfg.split.train).min(n - 1);
        train_idx.extend_from_slice(&idx[..cut]);
        val_idx.extend_from_slice(&idx[cut..]);
    }
    let pick = |idx: &[(usize, usize)]| -> (Vec<Image>, Vec<usize>) {
        idx.iter()
            .map(|&(l, i)| {
                (
                    if l == IN_DOMAIN {
                        positives[i].clone()
                    } else {
                        negatives[i].clone()
                    },
                    l,
                )
            })
            .unzip()
    };
    let (train_images, train_labels) = pick(&train_idx);
    let (val_images, val_labels) = pick(&val_idx);
    let stats = NormalizationStats::from_images(&train_images)?;
    let train = Dataset::from_images(&train_images, train_labels, &stats)?;
    let val = Dataset::from_images(&val_images, val_labels, &stats)?;
    let s = seed::derive(cfg.seed, "domain-member", 0);
    let net = Classifier::new(&cfg.architectures[0], cfg.input(2), s)?;
    let mut trainer = ClassifierTrainer::new(net, cfg, &train, &val, s);
    let history = fit(&mut trainer, cfg.epochs, cfg.patience, cfg.monitor)?;
    Ok(DomainModel {
        stats,
        classifier: trainer.net,
        history,
        config: cfg.clone(),
    })
}

impl DomainModel {
    pub fn to_archive(&self) -> Archive {
        let mut ar = Archive::new(
            CHECKPOINT_KIND,
            json!({
                "arch_id": self.classifier.arch_id(),
                "normalization": self.stats,
                "history": self.history,
                "config": self.config,
            }),
        );
        self.classifier.write_to(&mut ar, "net");
        ar
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            arch_id: String,
            normalization: NormalizationStats,
            history: History,
            config: TrainConfig,
        }
        let meta: Meta = serde_json::from_value(ar.meta.clone())
            .map_err(|e| Error::data(format!("bad domain scorer metadata: {e}")))?;
        Ok(Self {
            classifier: Classifier::read_from(ar, "net", &meta.arch_id, meta.config.input(2))?,
            stats: meta.normalization,
            history: meta.history,
            config: meta.config,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?.expect_kind(CHECKPOINT_KIND)?)
    }
}

impl DomainScorer for DomainModel {
    fn image_size(&self) -> Option<(usize, usize)> {
        let input = self.classifier.input();
        Some((input.width, input.height))
    }

    fn in_domain(&self, images: &[Image]) -> Result<Vec<f64>> {
        let input = self.classifier.input();
        map_chunks(images, SCORE_CHUNK, |chunk| {
            if let Some(im) = chunk
                .iter()
                .find(|im| im.width != input.width || im.height != input.height)
            {
                return Err(Error::data(format!(
                    "domain scorer expects {}x{} images, got {}x{}",
                    input.width, input.height, im.width, im.height
                )));
            }
            let data = Dataset::from_images(chunk, vec![0; chunk.len()], &self.stats)?;
            let p: Array2<f64> = super::classifier_probabilities(&self.classifier, &data.x);
            Ok(p.column(IN_DOMAIN).to_vec())
        })
    }
}
