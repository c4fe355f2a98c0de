//! Ensemble classifier training.
//!
//! A scenario manifest is split 80/20 per class, normalization statistics
//! come from the training part only, and each registry architecture is
//! trained with SGD and early stopping. The ensemble averages the members'
//! softmax outputs (or takes a vote).

pub mod arch;
pub mod domain;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::manifest::{Manifest, Source, Split};
use crate::nn::{Optimizer, OptimizerConfig};
use crate::scoring::{argmax, map_chunks, ImageScorer, SCORE_CHUNK};
use crate::seed;
use crate::split::{select_split, stratified_split, SplitFractions};
use crate::taxonomy::ClassTaxonomy;

pub use arch::{probabilities, Classifier, InputShape, DEFAULT_ARCHITECTURES};

const CHECKPOINT_KIND: &str = "ensemble";

/// Quantity watched by early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    ValAccuracy,
    ValLoss,
}

/// How member score vectors are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    Vote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub patience: usize,
    /// Images must be `image_size` x `image_size`.
    pub image_size: usize,
    pub monitor: Monitor,
    pub split: SplitFractions,
    pub architectures: Vec<String>,
    pub aggregation: Aggregation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 100,
            batch_size: 8,
            optimizer: OptimizerConfig::sgd(0.01, 0.9),
            patience: 10,
            image_size: 32,
            monitor: Monitor::ValAccuracy,
            split: SplitFractions::default(),
            architectures: DEFAULT_ARCHITECTURES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            aggregation: Aggregation::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::config(
                "epochs, patience and batch_size must all be at least 1",
            ));
        }
        if self.image_size < 4 {
            return Err(Error::config("image_size must be at least 4"));
        }
        if self.architectures.is_empty() {
            return Err(Error::config("at least one architecture is required"));
        }
        self.optimizer.validate()
    }

    fn input(&self, classes: usize) -> InputShape {
        InputShape {
            height: self.image_size,
            width: self.image_size,
            classes,
        }
    }
}

/// Per-channel mean and standard deviation in [0, 1] pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormalizationStats {
    /// Population statistics over every pixel of `images`.
    pub fn from_images(images: &[Image]) -> Result<Self> {
        let count: usize = images.iter().map(|im| im.data.len() / 3).sum();
        if count == 0 {
            return Err(Error::data(
                "cannot compute normalization of an empty split",
            ));
        }
        let mut mean = [0.0f64; 3];
        for im in images {
            for px in im.data.chunks_exact(3) {
                for c in 0..3 {
                    mean[c] += px[c] as f64 / 255.0;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = [0.0f64; 3];
        for im in images {
            for px in im.data.chunks_exact(3) {
                for c in 0..3 {
                    let d = px[c] as f64 / 255.0 - mean[c];
                    var[c] += d * d;
                }
            }
        }
        let mut std = [0.0f64; 3];
        for c in 0..3 {
            std[c] = (var[c] / count as f64).sqrt();
            if std[c] <= 1e-12 {
                return Err(Error::data(format!(
                    "degenerate data: channel {c} has zero variance"
                )));
            }
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, image: &Image) -> Vec<f32> {
        image
            .data
            .chunks_exact(3)
            .flat_map(|px| {
                (0..3).map(move |c| ((px[c] as f64 / 255.0 - self.mean[c]) / self.std[c]) as f32)
            })
            .collect()
    }
}

/// Load every image of `train` and compute its normalization statistics.
pub fn compute_normalization(train: &Manifest, image_size: usize) -> Result<NormalizationStats> {
    if train.is_empty() {
        return Err(Error::data(
            "cannot compute normalization of an empty split",
        ));
    }
    NormalizationStats::from_images(&load_images(train, image_size)?)
}

fn load_images(m: &Manifest, size: usize) -> Result<Vec<Image>> {
    map_chunks(&m.records, SCORE_CHUNK, |rs| {
        rs.iter()
            .map(|r| Image::load_sized(m.image_path(r), size, size))
            .collect()
    })
}

/// Normalized images with taxonomy-index labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Array2<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn from_images(
        images: &[Image],
        labels: Vec<usize>,
        stats: &NormalizationStats,
    ) -> Result<Self> {
        let d = images.first().map_or(0, |im| im.data.len());
        let mut x = Array2::zeros((images.len(), d));
        for (i, im) in images.iter().enumerate() {
            if im.data.len() != d {
                return Err(Error::data("images in one dataset must share a size"));
            }
            x.row_mut(i)
                .assign(&ndarray::ArrayView1::from(&stats.apply(im)));
        }
        Ok(Self { x, labels })
    }

    pub fn from_manifest(m: &Manifest, stats: &NormalizationStats, size: usize) -> Result<Self> {
        let labels = m
            .records
            .iter()
            .map(|r| m.taxonomy.require_index(&r.label))
            .collect::<Result<Vec<_>>>()?;
        Self::from_images(&load_images(m, size)?, labels, stats)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn rows(&self, idx: &[usize]) -> Array2<f32> {
        self.x.select(Axis(0), idx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept (1-based).
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

/// Stop at `min(epochs, best_epoch + patience)`, where `best_epoch` is the
/// earliest epoch with the best monitored value.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    monitor: Monitor,
    patience: usize,
    epochs: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopping {
    pub fn new(monitor: Monitor, patience: usize, epochs: usize) -> Self {
        Self {
            monitor,
            patience,
            epochs,
            best: None,
        }
    }

    /// Record an epoch; returns true when it is the new best.
    pub fn observe(&mut self, rec: &EpochRecord) -> bool {
        let value = match self.monitor {
            Monitor::ValAccuracy => rec.val_accuracy,
            Monitor::ValLoss => -rec.val_loss,
        };
        let better = match self.best {
            None => true,
            Some((_, b)) => value > b,
        };
        if better {
            self.best = Some((rec.epoch, value));
        }
        better
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        epoch >= self.epochs
            || self
                .best_epoch()
                .is_some_and(|b| epoch >= b + self.patience)
    }
}

/// Something that can be trained epoch by epoch with model selection.
pub trait Trainable {
    /// One pass over the training data; returns the mean training loss.
    fn train_epoch(&mut self, epoch: usize) -> Result<f64>;
    /// Validation (accuracy, loss).
    fn validate(&mut self) -> Result<(f64, f64)>;
    /// Remember the current weights as the best so far.
    fn keep_best(&mut self);
    /// Return to the remembered weights.
    fn restore_best(&mut self);
}

/// Train with early stopping and restore the best epoch's weights.
pub fn fit(
    member: &mut dyn Trainable,
    epochs: usize,
    patience: usize,
    monitor: Monitor,
) -> Result<History> {
    let mut stopper = EarlyStopping::new(monitor, patience, epochs);
    let mut records = Vec::new();
    for epoch in 1..=epochs {
        let train_loss = member.train_epoch(epoch)?;
        if !train_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite training loss at epoch {epoch}"
            )));
        }
        let (val_accuracy, val_loss) = member.validate()?;
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_accuracy,
            val_loss,
        };
        if stopper.observe(&rec) {
            member.keep_best();
        }
        records.push(rec);
        if stopper.should_stop(epoch) {
            break;
        }
    }
    member.restore_best();
    Ok(History {
        stopped_epoch: records.len(),
        best_epoch: stopper.best_epoch().unwrap_or(0),
        epochs: records,
    })
}

/// A [`Classifier`] bound to its training and validation data.
pub struct ClassifierTrainer<'a> {
    pub net: Classifier,
    opt: Optimizer,
    train: &'a Dataset,
    val: &'a Dataset,
    batch_size: usize,
    rng: seed::Rng,
    best: Option<Vec<Array2<f32>>>,
}

impl<'a> ClassifierTrainer<'a> {
    pub fn new(
        net: Classifier,
        cfg: &TrainConfig,
        train: &'a Dataset,
        val: &'a Dataset,
        shuffle_seed: u64,
    ) -> Self {
        Self {
            net,
            opt: Optimizer::new(cfg.optimizer),
            train,
            val,
            batch_size: cfg.batch_size,
            rng: seed::rng(shuffle_seed, "shuffle", 0),
            best: None,
        }
    }
}

impl Trainable for ClassifierTrainer<'_> {
    fn train_epoch(&mut self, _epoch: usize) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0f64;
        for idx in order.chunks(self.batch_size) {
            let x = self.train.rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| self.train.labels[i]).collect();
            let loss = self.net.accumulate_gradients(&x, &labels);
            if !loss.is_finite() {
                return Ok(f64::NAN);
            }
            self.opt.step(&mut self.net.params_mut());
            total += loss as f64 * idx.len() as f64;
        }
        Ok(total / self.train.len() as f64)
    }

    fn validate(&mut self) -> Result<(f64, f64)> {
        let probs = classifier_probabilities(&self.net, &self.val.x);
        Ok(accuracy_and_loss(&probs, &self.val.labels))
    }

    fn keep_best(&mut self) {
        self.best = Some(self.net.snapshot());
    }

    fn restore_best(&mut self) {
        if let Some(b) = &self.best {
            self.net.restore(b);
        }
    }
}

/// Softmax outputs of `net` for rows of `x`, computed in fixed chunks.
pub fn classifier_probabilities(net: &Classifier, x: &Array2<f32>) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows(), net.input().classes));
    for start in (0..x.nrows()).step_by(SCORE_CHUNK) {
        let end = (start + SCORE_CHUNK).min(x.nrows());
        let chunk = x.slice(ndarray::s![start..end, ..]).to_owned();
        out.slice_mut(ndarray::s![start..end, ..])
            .assign(&probabilities(&net.logits(&chunk)));
    }
    out
}

/// Top-1 accuracy (ties to the lower index) and mean negative log-likelihood.
pub fn accuracy_and_loss(probs: &Array2<f64>, labels: &[usize]) -> (f64, f64) {
    if labels.is_empty() {
        return (0.0, 0.0);
    }
    let mut correct = 0usize;
    let mut nll = 0.0;
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        let row = row.to_vec();
        if argmax(&row) == y {
            correct += 1;
        }
        nll -= row[y].max(1e-12).ln();
    }
    (
        correct as f64 / labels.len() as f64,
        nll / labels.len() as f64,
    )
}

/// A scenario split into train/val with statistics from the train part.
pub struct PreparedData {
    pub split: Manifest,
    pub stats: NormalizationStats,
    pub train: Dataset,
    pub val: Dataset,
}

impl PreparedData {
    pub fn new(scenario: &Manifest, cfg: &TrainConfig) -> Result<Self> {
        let split = stratified_split(scenario, cfg.split, seed::derive(cfg.seed, "split", 0))?;
        let train_m = select_split(&split, Split::Train);
        let val_m = select_split(&split, Split::Val);
        if train_m.is_empty() || val_m.is_empty() {
            return Err(Error::data(format!(
                "empty split: {} training and {} validation records",
                train_m.len(),
                val_m.len()
            )));
        }
        let stats = compute_normalization(&train_m, cfg.image_size)?;
        Ok(Self {
            train: Dataset::from_manifest(&train_m, &stats, cfg.image_size)?,
            val: Dataset::from_manifest(&val_m, &stats, cfg.image_size)?,
            split,
            stats,
        })
    }
}

/// Seed of ensemble member `index`.
pub fn member_seed(cfg: &TrainConfig, index: usize) -> u64 {
    seed::derive(
        cfg.seed,
        &format!("member/{}", cfg.architectures[index]),
        index as u64,
    )
}

fn train_prepared(
    data: &PreparedData,
    cfg: &TrainConfig,
    index: usize,
    classes: usize,
) -> Result<(Classifier, History)> {
    let s = member_seed(cfg, index);
    let net = Classifier::new(&cfg.architectures[index], cfg.input(classes), s)?;
    let mut trainer = ClassifierTrainer::new(net, cfg, &data.train, &data.val, s);
    let history = fit(&mut trainer, cfg.epochs, cfg.patience, cfg.monitor)
        .map_err(|e| e.in_stage(&format!("member {} ({})", index, cfg.architectures[index])))?;
    if !trainer.net.is_finite() {
        return Err(Error::Divergence(format!(
            "member {} weights became non-finite",
            cfg.architectures[index]
        )));
    }
    Ok((trainer.net, history))
}

/// Train one architecture on a scenario (the first member slot using `arch_id`).
pub fn train_member(
    arch_id: &str,
    scenario: &Manifest,
    cfg: &TrainConfig,
) -> Result<(Classifier, History, NormalizationStats)> {
    cfg.validate()?;
    let cfg = TrainConfig {
        architectures: vec![arch_id.to_string()],
        ..cfg.clone()
    };
    let data = PreparedData::new(scenario, &cfg)?;
    let (net, history) = train_prepared(&data, &cfg, 0, scenario.taxonomy.len())?;
    Ok((net, history, data.stats))
}

/// What an ensemble was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioInfo {
    pub name: String,
    pub real_per_class: usize,
    pub synthetic_per_class: usize,
    pub manifest_digest: String,
    pub record_ids: Vec<String>,
}

impl ScenarioInfo {
    /// Per-class counts are averaged over classes (scenarios are balanced).
    pub fn describe(name: &str, m: &Manifest) -> Self {
        let classes = m.taxonomy.len().max(1);
        Self {
            name: name.to_string(),
            real_per_class: m.class_counts(Some(Source::Real)).total() / classes,
            synthetic_per_class: m.class_counts(Some(Source::Synthetic)).total() / classes,
            manifest_digest: m.digest(),
            record_ids: m.records.iter().map(|r| r.record_id.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedMember {
    pub classifier: Classifier,
    pub history: History,
}

/// Trained members sharing one set of normalization statistics.
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub taxonomy: ClassTaxonomy,
    pub stats: NormalizationStats,
    pub members: Vec<TrainedMember>,
    pub aggregation: Aggregation,
    pub config: TrainConfig,
    pub scenario: ScenarioInfo,
}

/// Train every configured architecture on the same split of `scenario`.
pub fn train_ensemble(name: &str, scenario: &Manifest, cfg: &TrainConfig) -> Result<EnsembleModel> {
    cfg.validate()?;
    let data = PreparedData::new(scenario, cfg)?;
    let classes = scenario.taxonomy.len();
    let indices: Vec<usize> = (0..cfg.architectures.len()).collect();
    #[cfg(feature = "parallel")]
    let trained: Vec<Result<(Classifier, History)>> = {
        use rayon::prelude::*;
        indices
            .par_iter()
            .map(|&i| train_prepared(&data, cfg, i, classes))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let trained: Vec<Result<(Classifier, History)>> = indices
        .iter()
        .map(|&i| train_prepared(&data, cfg, i, classes))
        .collect();
    let members = trained
        .into_iter()
        .map(|r| {
            r.map(|(classifier, history)| TrainedMember {
                classifier,
                history,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleModel {
        taxonomy: scenario.taxonomy.clone(),
        stats: data.stats,
        members,
        aggregation: cfg.aggregation,
        config: cfg.clone(),
        scenario: ScenarioInfo::describe(name, scenario),
    })
}

/// Combine per-member probability matrices (same shape) into one.
pub fn aggregate(member_scores: &[Array2<f64>], how: Aggregation) -> Array2<f64> {
    let first = member_scores.first().expect("at least one member");
    let m = member_scores.len() as f64;
    let mut out = Array2::zeros(first.raw_dim());
    for s in member_scores {
        match how {
            Aggregation::Mean => out += s,
            Aggregation::Vote => {
                for (mut o, row) in out.rows_mut().into_iter().zip(s.rows()) {
                    o[argmax(&row.to_vec())] += 1.0;
                }
            }
        }
    }
    out.mapv_inplace(|v| v / m);
    out
}

impl EnsembleModel {
    pub fn input(&self) -> InputShape {
        self.config.input(self.taxonomy.len())
    }

    /// Score vectors for already normalized rows.
    pub fn predict_normalized(&self, x: &Array2<f32>) -> Array2<f64> {
        let per_member: Vec<Array2<f64>> = self
            .members
            .iter()
            .map(|m| classifier_probabilities(&m.classifier, x))
            .collect();
        aggregate(&per_member, self.aggregation)
    }

    /// Score vector over the taxonomy for one image.
    pub fn predict(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self
            .score_images(std::slice::from_ref(image))?
            .row(0)
            .to_vec())
    }

    pub fn to_archive(&self) -> Archive {
        let members: Vec<_> = self
            .members
            .iter()
            .map(|m| json!({"arch_id": m.classifier.arch_id(), "history": m.history}))
            .collect();
        let mut ar = Archive::new(
            CHECKPOINT_KIND,
            json!({
                "taxonomy": self.taxonomy,
                "normalization": self.stats,
                "aggregation": self.aggregation,
                "config": self.config,
                "scenario": self.scenario,
                "members": members,
            }),
        );
        for (i, m) in self.members.iter().enumerate() {
            m.classifier.write_to(&mut ar, &format!("member{i}"));
        }
        ar
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        #[derive(Deserialize)]
        struct MemberMeta {
            arch_id: String,
            history: History,
        }
        #[derive(Deserialize)]
        struct Meta {
            taxonomy: ClassTaxonomy,
            normalization: NormalizationStats,
            aggregation: Aggregation,
            config: TrainConfig,
            scenario: ScenarioInfo,
            members: Vec<MemberMeta>,
        }
        let meta: Meta = serde_json::from_value(ar.meta.clone())
            .map_err(|e| Error::data(format!("bad ensemble checkpoint metadata: {e}")))?;
        let input = meta.config.input(meta.taxonomy.len());
        let members = meta
            .members
            .into_iter()
            .enumerate()
            .map(|(i, m)| {
                Ok(TrainedMember {
                    classifier: Classifier::read_from(
                        ar,
                        &format!("member{i}"),
                        &m.arch_id,
                        input,
                    )?,
                    history: m.history,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if members.is_empty() {
            return Err(Error::data("ensemble checkpoint has no members"));
        }
        Ok(Self {
            taxonomy: meta.taxonomy,
            stats: meta.normalization,
            members,
            aggregation: meta.aggregation,
            config: meta.config,
            scenario: meta.scenario,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?.expect_kind(CHECKPOINT_KIND)?)
    }
}

impl ImageScorer for EnsembleModel {
    fn num_outputs(&self) -> usize {
        self.taxonomy.len()
    }

    fn image_size(&self) -> Option<(usize, usize)> {
        let input = self.input();
        Some((input.width, input.height))
    }

    fn score_images(&self, images: &[Image]) -> Result<Array2<f64>> {
        let input = self.input();
        let rows = map_chunks(images, SCORE_CHUNK, |chunk| {
            for im in chunk {
                if im.width != input.width || im.height != input.height {
                    return Err(Error::data(format!(
                        "ensemble expects {}x{} images, got {}x{}",
                        input.width, input.height, im.width, im.height
                    )));
                }
            }
            let data = Dataset::from_images(chunk, vec![0; chunk.len()], &self.stats)?;
            Ok(self
                .predict_normalized(&data.x)
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect())
        })?;
        let mut out = Array2::zeros((rows.len(), self.taxonomy.len()));
        for (i, r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&ndarray::ArrayView1::from(r));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Replays scripted validation accuracies.
    struct Scripted {
        accs: Vec<f64>,
        at: usize,
        kept: Option<usize>,
    }

    impl Trainable for Scripted {
        fn train_epoch(&mut self, _epoch: usize) -> Result<f64> {
            Ok(1.0)
        }
        fn validate(&mut self) -> Result<(f64, f64)> {
            let a = self.accs[self.at.min(self.accs.len() - 1)];
            self.at += 1;
            Ok((a, 1.0 - a))
        }
        fn keep_best(&mut self) {
            self.kept = Some(self.at);
        }
        fn restore_best(&mut self) {}
    }

    fn run(accs: Vec<f64>, epochs: usize, patience: usize) -> History {
        let mut s = Scripted {
            accs,
            at: 0,
            kept: None,
        };
        fit(&mut s, epochs, patience, Monitor::ValAccuracy).unwrap()
    }

    #[test]
    fn constant_accuracy_stops_after_patience() {
        let h = run(vec![0.5], 100, 10);
        assert_eq!(h.stopped_epoch, 11);
        assert_eq!(h.best_epoch, 1);
    }

    #[test]
    fn improving_accuracy_runs_all_epochs() {
        let h = run((0..100).map(|i| i as f64 / 100.0).collect(), 100, 10);
        assert_eq!(h.stopped_epoch, 100);
        assert_eq!(h.best_epoch, 100);
    }

    #[test]
    fn loss_monitor_uses_validation_loss() {
        struct L(usize);
        impl Trainable for L {
            fn train_epoch(&mut self, _: usize) -> Result<f64> {
                Ok(0.0)
            }
            fn validate(&mut self) -> Result<(f64, f64)> {
                self.0 += 1;
                // accuracy flat, loss decreasing until epoch 5
                Ok((0.3, (6 - self.0.min(5)) as f64))
            }
            fn keep_best(&mut self) {}
            fn restore_best(&mut self) {}
        }
        let h = fit(&mut L(0), 50, 3, Monitor::ValLoss).unwrap();
        assert_eq!((h.best_epoch, h.stopped_epoch), (5, 8));
    }

    #[test]
    fn non_finite_loss_names_the_epoch() {
        struct Nan;
        impl Trainable for Nan {
            fn train_epoch(&mut self, e: usize) -> Result<f64> {
                Ok(if e == 3 { f64::NAN } else { 1.0 })
            }
            fn validate(&mut self) -> Result<(f64, f64)> {
                Ok((0.0, 0.0))
            }
            fn keep_best(&mut self) {}
            fn restore_best(&mut self) {}
        }
        let err = fit(&mut Nan, 10, 10, Monitor::ValAccuracy).unwrap_err();
        assert!(
            matches!(&err, Error::Divergence(m) if m.contains("epoch 3")),
            "{err}"
        );
    }

    proptest! {
        #[test]
        fn stop_epoch_follows_the_rule(accs in prop::collection::vec(0u8..5, 1..60), patience in 1usize..12, epochs in 1usize..60) {
            let accs: Vec<f64> = accs.into_iter().map(f64::from).collect();
            let h = run(accs.clone(), epochs, patience);
            let seen: Vec<f64> = (0..h.stopped_epoch).map(|i| accs[i.min(accs.len() - 1)]).collect();
            let max = seen.iter().cloned().fold(f64::MIN, f64::max);
            let best = seen.iter().position(|&a| a == max).unwrap() + 1;
            prop_assert_eq!(h.best_epoch, best);
            prop_assert_eq!(h.stopped_epoch, epochs.min(best + patience));
        }
    }

    #[test]
    fn black_and_white_images_have_half_mean_and_std() {
        let s = NormalizationStats::from_images(&[
            Image::filled(2, 2, [0; 3]),
            Image::filled(2, 2, [255; 3]),
        ])
        .unwrap();
        for c in 0..3 {
            assert!((s.mean[c] - 0.5).abs() < 1e-12);
            assert!((s.std[c] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_gray_is_degenerate() {
        let err = NormalizationStats::from_images(&[Image::filled(3, 3, [128; 3])]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(NormalizationStats::from_images(&[]).is_err());
    }

    #[test]
    fn aggregation_mean_and_vote() {
        let a = ndarray::array![[1.0, 0.0, 0.0]];
        let b = ndarray::array![[0.0, 1.0, 0.0]];
        let c = ndarray::array![[0.0, 0.0, 1.0]];
        let third = 1.0 / 3.0;
        let mean = aggregate(&[a.clone(), b.clone(), c.clone()], Aggregation::Mean);
        assert!(mean.iter().all(|v| (v - third).abs() < 1e-15));
        let same = aggregate(&[b.clone(), b.clone(), b.clone()], Aggregation::Mean);
        assert_eq!(same, b);
        let soft = ndarray::array![[0.2, 0.5, 0.3]];
        let vote = aggregate(&[soft.clone(), soft, a], Aggregation::Vote);
        assert_eq!(vote, ndarray::array![[third, 2.0 * third, 0.0]]);
    }

    #[test]
    fn config_rejects_unknown_fields_and_zero_patience() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochz": 3}"#).is_err());
        let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(cfg.batch_size, 8);
        assert!(TrainConfig { patience: 0, ..cfg }.validate().is_err());
    }
}
