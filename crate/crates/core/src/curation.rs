//! Classifier-gated curation of generated images: a domain filter followed
//! by a label-consistency filter.
//!
//! Filters never touch files on disk. Each stage returns a derived manifest
//! and one [`FilterDecision`] per input record.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{write_atomic, ClassCounts, ImageRecord, Manifest};
use crate::scoring::{argmax, load_for, map_chunks, DomainScorer, ImageScorer, SCORE_CHUNK};

pub const DOMAIN_STAGE: &str = "filter-domain";
pub const LABEL_STAGE: &str = "filter-label";

/// Tolerance on score vectors summing to one.
const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Domain,
    Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub record_id: String,
    pub stage: Stage,
    pub accepted: bool,
    /// Domain stage: P(in-domain). Label stage: score of the predicted class.
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::config(format!(
            "domain threshold {threshold} is outside [0, 1]"
        )));
    }
    Ok(())
}

/// Keep records whose in-domain score is at least `threshold`.
///
/// An unreadable image is rejected with score 0 and a note; the run goes on.
pub fn domain_filter(
    m: &Manifest,
    scorer: &dyn DomainScorer,
    threshold: f64,
) -> Result<(Manifest, Vec<FilterDecision>)> {
    check_threshold(threshold)?;
    let scored: Vec<(f64, Option<String>)> = map_chunks(&m.records, SCORE_CHUNK, |rs| {
        let mut images = Vec::with_capacity(rs.len());
        let mut slots = Vec::with_capacity(rs.len());
        for r in rs {
            match load_for(&m.image_path(r), scorer.image_size()) {
                Ok(im) => {
                    slots.push(Ok(images.len()));
                    images.push(im);
                }
                Err(e) => slots.push(Err(e.to_string())),
            }
        }
        let scores = scorer.in_domain(&images)?;
        if scores.len() != images.len() {
            return Err(Error::config(format!(
                "domain scorer returned {} scores for {} images",
                scores.len(),
                images.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::config(format!(
                "domain scorer returned {s}, outside [0, 1]"
            )));
        }
        Ok(slots
            .into_iter()
            .map(|slot| match slot {
                Ok(i) => (scores[i], None),
                Err(note) => (0.0, Some(note)),
            })
            .collect())
    })?;
    let mut kept = Vec::new();
    let mut decisions = Vec::with_capacity(m.len());
    for (r, (score, note)) in m.records.iter().zip(scored) {
        let accepted = note.is_none() && score >= threshold;
        decisions.push(FilterDecision {
            record_id: r.record_id.clone(),
            stage: Stage::Domain,
            accepted,
            score,
            predicted_label: None,
            note,
        });
        if accepted {
            let mut r = r.clone();
            r.scores_mut().domain_score = Some(score);
            kept.push(r);
        }
    }
    Ok((m.derive(DOMAIN_STAGE, kept), decisions))
}

/// Keep records whose top-scored class (ties to taxonomy order) is their own label.
pub fn label_filter(
    m: &Manifest,
    ensemble: &dyn ImageScorer,
) -> Result<(Manifest, Vec<FilterDecision>)> {
    let k = m.taxonomy.len();
    if ensemble.num_outputs() != k {
        return Err(Error::config(format!(
            "ensemble scores {} classes but the taxonomy has {k}",
            ensemble.num_outputs()
        )));
    }
    let rows: Vec<Vec<f64>> = map_chunks(&m.records, SCORE_CHUNK, |rs| {
        let images = rs
            .iter()
            .map(|r| load_for(&m.image_path(r), ensemble.image_size()))
            .collect::<Result<Vec<_>>>()?;
        let scores = ensemble.score_images(&images)?;
        if scores.nrows() != images.len() || scores.ncols() != k {
            return Err(Error::config(format!(
                "ensemble returned a {}x{} score matrix for {} images and {k} classes",
                scores.nrows(),
                scores.ncols(),
                images.len()
            )));
        }
        Ok(scores.rows().into_iter().map(|r| r.to_vec()).collect())
    })?;
    let mut kept = Vec::new();
    let mut decisions = Vec::with_capacity(m.len());
    for (r, scores) in m.records.iter().zip(rows) {
        check_score_vector(&r.record_id, &scores)?;
        let pred = argmax(&scores);
        let predicted = m.taxonomy.class_at(pred).class_id.clone();
        let accepted = predicted == r.label;
        decisions.push(FilterDecision {
            record_id: r.record_id.clone(),
            stage: Stage::Label,
            accepted,
            score: scores[pred],
            predicted_label: Some(predicted.clone()),
            note: None,
        });
        let mut r: ImageRecord = r.clone();
        let fs = r.scores_mut();
        fs.predicted_label = Some(predicted);
        fs.label_confidence = Some(scores[pred]);
        if accepted {
            kept.push(r);
        }
    }
    Ok((m.derive(LABEL_STAGE, kept), decisions))
}

fn check_score_vector(record_id: &str, scores: &[f64]) -> Result<()> {
    let sum: f64 = scores.iter().sum();
    if scores.iter().any(|s| !(0.0..=1.0).contains(s)) || (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::config(format!(
            "score vector for '{record_id}' is not a probability vector (sum {sum})"
        )));
    }
    Ok(())
}

/// Counts and rates for one curation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurationReport {
    pub threshold: f64,
    pub input: ClassCounts,
    pub domain_accepted: ClassCounts,
    pub label_accepted: ClassCounts,
    pub input_total: usize,
    pub domain_accepted_total: usize,
    pub label_accepted_total: usize,
    /// domain accepted / input.
    pub domain_rate: f64,
    /// label accepted / domain accepted (the label stage's input).
    pub label_rate: f64,
    /// label accepted / input.
    pub overall_rate: f64,
}

/// `num / den`, or 0 for an empty stage.
fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl CurationReport {
    fn new(threshold: f64, input: &Manifest, domain: &Manifest, label: &Manifest) -> Self {
        let (a, b, c) = (input.len(), domain.len(), label.len());
        Self {
            threshold,
            input: input.class_counts(None),
            domain_accepted: domain.class_counts(None),
            label_accepted: label.class_counts(None),
            input_total: a,
            domain_accepted_total: b,
            label_accepted_total: c,
            domain_rate: rate(b, a),
            label_rate: rate(c, b),
            overall_rate: rate(c, a),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Output of [`curate`].
#[derive(Debug, Clone)]
pub struct Curation {
    pub manifest: Manifest,
    pub report: CurationReport,
    /// Domain decisions for every input, then label decisions for the domain survivors.
    pub decisions: Vec<FilterDecision>,
}

/// Domain filter, then label filter.
pub fn curate(
    generated: &Manifest,
    scorer: &dyn DomainScorer,
    ensemble: &dyn ImageScorer,
    threshold: f64,
) -> Result<Curation> {
    let (domain, mut decisions) =
        domain_filter(generated, scorer, threshold).map_err(|e| e.in_stage(DOMAIN_STAGE))?;
    let (label, label_decisions) =
        label_filter(&domain, ensemble).map_err(|e| e.in_stage(LABEL_STAGE))?;
    decisions.extend(label_decisions);
    Ok(Curation {
        report: CurationReport::new(threshold, generated, &domain, &label),
        manifest: label,
        decisions,
    })
}

/// Write decisions as one JSON object per line.
pub fn write_decisions(path: impl AsRef<Path>, decisions: &[FilterDecision]) -> Result<()> {
    let mut out = String::new();
    for d in decisions {
        out.push_str(&serde_json::to_string(d).expect("decision serializes"));
        out.push('\n');
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

pub fn read_decisions(path: impl AsRef<Path>) -> Result<Vec<FilterDecision>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::manifest::{Source, STAGE_SEP};
    use crate::scoring::ConstantDomainScorer;
    use crate::taxonomy::ClassTaxonomy;
    use ndarray::Array2;

    /// Scores each image by its first red byte; a stand-in with known outputs.
    struct RedScorer;

    impl DomainScorer for RedScorer {
        fn in_domain(&self, images: &[Image]) -> Result<Vec<f64>> {
            Ok(images.iter().map(|im| im.data[0] as f64 / 255.0).collect())
        }
    }

    /// Puts all mass on the class encoded in the green byte.
    struct GreenEnsemble(usize);

    impl ImageScorer for GreenEnsemble {
        fn num_outputs(&self) -> usize {
            self.0
        }
        fn score_images(&self, images: &[Image]) -> Result<Array2<f64>> {
            let mut out = Array2::zeros((images.len(), self.0));
            for (i, im) in images.iter().enumerate() {
                out[[i, im.data[1] as usize % self.0]] = 1.0;
            }
            Ok(out)
        }
    }

    struct Uniform(usize);

    impl ImageScorer for Uniform {
        fn num_outputs(&self) -> usize {
            self.0
        }
        fn score_images(&self, images: &[Image]) -> Result<Array2<f64>> {
            Ok(Array2::from_elem(
                (images.len(), self.0),
                1.0 / self.0 as f64,
            ))
        }
    }

    fn fixture(dir: &Path, n: usize) -> Manifest {
        let t = ClassTaxonomy::skin_default();
        let mut m = Manifest::new(t.clone(), "generate");
        m.base_dir = dir.to_path_buf();
        for i in 0..n {
            let label = t.class_at(i % 6).class_id.clone();
            Image::filled(2, 2, [(i * 37 % 256) as u8, ((i / 6) % 6) as u8, 0])
                .save_png(dir.join(format!("{i}.png")))
                .unwrap();
            let mut r = ImageRecord::real(format!("g/{i}"), format!("{i}.png"), label);
            r.source = Source::Synthetic;
            m.records.push(r);
        }
        m
    }

    #[test]
    fn constant_scorers_accept_all_or_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), 12);
        let (all, d) = domain_filter(&m, &ConstantDomainScorer(1.0), 0.5).unwrap();
        assert_eq!(all.len(), 12);
        assert!(d.iter().all(|d| d.accepted && d.stage == Stage::Domain));
        assert!(all
            .records
            .iter()
            .all(|r| r.filter_scores.as_ref().unwrap().domain_score == Some(1.0)));
        let (none, _) = domain_filter(&m, &ConstantDomainScorer(0.0), 0.5).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn unreadable_image_is_rejected_with_note() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), 6);
        std::fs::write(dir.path().join("3.png"), b"not a png").unwrap();
        let (out, d) = domain_filter(&m, &ConstantDomainScorer(1.0), 0.5).unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(d[3].score, 0.0);
        assert!(!d[3].accepted && d[3].note.is_some());
    }

    #[test]
    fn uniform_ensemble_accepts_only_first_class() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), 18);
        let (out, d) = label_filter(&m, &Uniform(6)).unwrap();
        let first = &m.taxonomy.class_at(0).class_id;
        assert!(d
            .iter()
            .all(|d| d.predicted_label.as_deref() == Some(first.as_str())));
        assert_eq!(out.len(), 3);
        assert!(out.records.iter().all(|r| &r.label == first));
    }

    #[test]
    fn malformed_score_vectors_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), 6);
        assert!(matches!(
            label_filter(&m, &Uniform(5)),
            Err(Error::Config(_))
        ));
        struct Half;
        impl ImageScorer for Half {
            fn num_outputs(&self) -> usize {
                6
            }
            fn score_images(&self, images: &[Image]) -> Result<Array2<f64>> {
                Ok(Array2::from_elem((images.len(), 6), 0.5 / 6.0))
            }
        }
        assert!(matches!(label_filter(&m, &Half), Err(Error::Config(_))));
    }

    #[test]
    fn curate_chains_stages_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), 60);
        let c = curate(&m, &RedScorer, &GreenEnsemble(6), 0.4).unwrap();
        let stages: Vec<&str> = c.manifest.created_by.split(STAGE_SEP).collect();
        assert_eq!(stages, ["generate", DOMAIN_STAGE, LABEL_STAGE]);
        assert_eq!(c.report.input_total, 60);
        assert_eq!(c.decisions.len(), 60 + c.report.domain_accepted_total);
        assert_eq!(c.report.label_accepted_total, c.manifest.len());
        let ids = m.record_ids();
        assert!(c
            .manifest
            .records
            .iter()
            .all(|r| ids.contains(r.record_id.as_str())));
    }

    #[test]
    fn empty_input_gives_zero_report() {
        let m = Manifest::new(ClassTaxonomy::skin_default(), "generate");
        let c = curate(&m, &ConstantDomainScorer(1.0), &Uniform(6), 0.5).unwrap();
        assert!(c.manifest.is_empty());
        assert_eq!(
            (
                c.report.input_total,
                c.report.domain_rate,
                c.report.label_rate
            ),
            (0, 0.0, 0.0)
        );
    }

    #[test]
    fn decisions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), 12);
        let c = curate(&m, &RedScorer, &GreenEnsemble(6), 0.2).unwrap();
        let p = dir.path().join("decisions.jsonl");
        write_decisions(&p, &c.decisions).unwrap();
        assert_eq!(read_decisions(&p).unwrap(), c.decisions);
    }

    #[test]
    fn threshold_outside_unit_interval_is_rejected() {
        let m = Manifest::new(ClassTaxonomy::skin_default(), "generate");
        assert!(domain_filter(&m, &ConstantDomainScorer(1.0), 1.5).is_err());
    }
}
