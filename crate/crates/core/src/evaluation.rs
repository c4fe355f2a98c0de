//! Top-k accuracy and the scenario comparison report.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::manifest::{write_atomic, Manifest};
use crate::scoring::{load_for, map_chunks, ImageScorer, SCORE_CHUNK};
use crate::training::ScenarioInfo;

/// k values reported in the standard table.
pub const REPORT_KS: [usize; 5] = [1, 2, 3, 4, 5];

/// Position of `label` when the row is ranked by descending score, ties
/// going to the lower class index. 0 is the top.
pub fn rank_of(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < label))
        .count()
}

fn check_inputs(scores: &ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if scores.nrows() != labels.len() {
        return Err(Error::config(format!(
            "{} score vectors but {} labels",
            scores.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::config("top-k accuracy of an empty set"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= scores.ncols()) {
        return Err(Error::config(format!(
            "label index {l} out of range for {} classes",
            scores.ncols()
        )));
    }
    Ok(())
}

/// Number of rows whose label ranks within the top `k`, for every `k` in `ks`.
pub fn top_k_hits(scores: &ArrayView2<f64>, labels: &[usize], ks: &[usize]) -> Result<Vec<usize>> {
    check_inputs(scores, labels)?;
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > scores.ncols()) {
        return Err(Error::config(format!(
            "k = {k} outside 1..={}",
            scores.ncols()
        )));
    }
    let ranks: Vec<usize> = scores
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &l)| rank_of(row.as_slice().expect("standard layout"), l))
        .collect();
    Ok(ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r < k).count())
        .collect())
}

/// Fraction of rows whose label is among the `k` highest scores.
pub fn top_k_accuracy(scores: &ArrayView2<f64>, labels: &[usize], k: usize) -> Result<f64> {
    let hits = top_k_hits(scores, labels, &[k])?[0];
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scenario: String,
    pub real_per_class: usize,
    pub synthetic_per_class: usize,
    /// Accuracy in percent for each reported k.
    pub accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMax {
    pub k: usize,
    pub value: f64,
    pub scenarios: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub test_digest: String,
    pub test_records: usize,
    pub rows: Vec<EvalRow>,
    #[serde(default)]
    pub config: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Plain,
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Self::Plain),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(Error::config(format!(
                "unknown report format '{s}' (expected plain, csv or json)"
            ))),
        }
    }
}

/// Two-decimal rendering used everywhere in reports.
fn pct(v: f64) -> String {
    format!("{v:.2}")
}

impl EvalReport {
    /// Best value per k as rendered (two decimals), with every scenario reaching it.
    pub fn column_maxima(&self) -> Vec<ColumnMax> {
        self.ks
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| {
                let best = self
                    .rows
                    .iter()
                    .map(|r| pct(r.accuracy[i]))
                    .max_by(|a, b| {
                        a.parse::<f64>()
                            .unwrap()
                            .total_cmp(&b.parse::<f64>().unwrap())
                    })?;
                Some(ColumnMax {
                    k,
                    value: best.parse().unwrap(),
                    scenarios: self
                        .rows
                        .iter()
                        .filter(|r| pct(r.accuracy[i]) == best)
                        .map(|r| r.scenario.clone())
                        .collect(),
                })
            })
            .collect()
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Csv => self.render_csv(),
            ReportFormat::Plain => self.render_plain(),
            ReportFormat::Json => {
                let mut v = serde_json::to_value(self).expect("report serializes");
                v["column_maxima"] = serde_json::to_value(self.column_maxima()).unwrap();
                serde_json::to_string_pretty(&v).unwrap() + "\n"
            }
        }
    }

    /// Numeric table in the layout `real,synthetic,top1,...`, one line per row.
    fn render_csv(&self) -> String {
        let mut out = String::from("real,synthetic");
        for k in &self.ks {
            write!(out, ",top{k}").unwrap();
        }
        out.push('\n');
        for r in &self.rows {
            write!(out, "{},{}", r.real_per_class, r.synthetic_per_class).unwrap();
            for a in &r.accuracy {
                write!(out, ",{}", pct(*a)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    fn render_plain(&self) -> String {
        let maxima = self.column_maxima();
        let mut header: Vec<String> = vec!["dataset".into(), "real".into(), "synthetic".into()];
        header.extend(self.ks.iter().map(|k| format!("top-{k}")));
        let mut table = vec![header];
        for r in &self.rows {
            let mut line = vec![
                r.scenario.clone(),
                r.real_per_class.to_string(),
                r.synthetic_per_class.to_string(),
            ];
            for (i, a) in r.accuracy.iter().enumerate() {
                let best = maxima
                    .get(i)
                    .is_some_and(|m| m.scenarios.contains(&r.scenario));
                line.push(format!("{}{}", pct(*a), if best { "*" } else { " " }));
            }
            table.push(line);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in &table {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, w))| {
                    if c == 0 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        if !self.rows.is_empty() {
            out.push_str("* column maximum");
            let ties: Vec<String> = maxima
                .iter()
                .filter(|m| m.scenarios.len() > 1)
                .map(|m| format!("top-{} ({})", m.k, m.scenarios.join(", ")))
                .collect();
            if !ties.is_empty() {
                write!(out, "; ties: {}", ties.join("; ")).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Per-image scores of one scenario model on the test set.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDump {
    pub scenario: String,
    pub record_ids: Vec<String>,
    pub labels: Vec<String>,
    pub scores: Array2<f64>,
}

impl ScoreDump {
    /// CSV with header `record_id,label,s1,...,sK`; scores use shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("record_id,label");
        for j in 1..=self.scores.ncols() {
            write!(out, ",s{j}").unwrap();
        }
        out.push('\n');
        for ((id, label), row) in self
            .record_ids
            .iter()
            .zip(&self.labels)
            .zip(self.scores.rows())
        {
            write!(out, "{id},{label}").unwrap();
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(scenario: &str, text: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: format!("scores/{scenario}.csv").into(),
            line,
            message,
        };
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty file".into()))?;
        let k = header.split(',').count().saturating_sub(2);
        let (mut ids, mut labels, mut flat) = (Vec::new(), Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != k + 2 {
                return Err(parse_err(i + 2, format!("expected {} fields", k + 2)));
            }
            ids.push(cells[0].to_string());
            labels.push(cells[1].to_string());
            for c in &cells[2..] {
                flat.push(
                    c.parse::<f64>()
                        .map_err(|e| parse_err(i + 2, e.to_string()))?,
                );
            }
        }
        let scores = Array2::from_shape_vec((ids.len(), k), flat).expect("row lengths checked");
        Ok(Self {
            scenario: scenario.to_string(),
            record_ids: ids,
            labels,
            scores,
        })
    }
}

/// A trained model to evaluate, with what it was trained on.
pub struct ScenarioModel<'a> {
    pub info: ScenarioInfo,
    pub scorer: &'a dyn ImageScorer,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub dumps: Vec<ScoreDump>,
}

/// Score every model on the whole test manifest and tabulate top-k accuracy.
pub fn evaluate_scenarios(
    models: &[ScenarioModel],
    test: &Manifest,
    ks: &[usize],
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::data("test manifest is empty"));
    }
    let mut names = HashSet::new();
    if let Some(m) = models.iter().find(|m| !names.insert(m.info.name.as_str())) {
        return Err(Error::config(format!(
            "scenario '{}' appears twice",
            m.info.name
        )));
    }
    let test_ids = test.record_ids();
    let labels: Vec<usize> = test
        .records
        .iter()
        .map(|r| test.taxonomy.require_index(&r.label))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(models.len());
    let mut dumps = Vec::with_capacity(models.len());
    for m in models {
        let name = &m.info.name;
        let overlap: Vec<&str> = m
            .info
            .record_ids
            .iter()
            .map(String::as_str)
            .filter(|id| test_ids.contains(id))
            .collect();
        if let Some(first) = overlap.first() {
            return Err(Error::data(format!(
                "test manifest shares {} record(s) with scenario '{name}' (e.g. '{first}')",
                overlap.len()
            )));
        }
        if m.scorer.num_outputs() != test.taxonomy.len() {
            return Err(Error::config(format!(
                "model for '{name}' scores {} classes, test taxonomy has {}",
                m.scorer.num_outputs(),
                test.taxonomy.len()
            )));
        }
        let size = m.scorer.image_size();
        let flat: Vec<Vec<f64>> = map_chunks(&test.records, SCORE_CHUNK, |rs| {
            let images = rs
                .iter()
                .map(|r| load_for(&test.image_path(r), size))
                .collect::<Result<Vec<_>>>()?;
            let s = m.scorer.score_images(&images)?;
            Ok(s.rows().into_iter().map(|r| r.to_vec()).collect())
        })?;
        let k = test.taxonomy.len();
        let scores = Array2::from_shape_vec((flat.len(), k), flat.into_iter().flatten().collect())
            .map_err(|e| {
                Error::config(format!("model for '{name}' returned ragged scores: {e}"))
            })?;
        let hits = top_k_hits(&scores.view(), &labels, ks)?;
        rows.push(EvalRow {
            scenario: name.clone(),
            real_per_class: m.info.real_per_class,
            synthetic_per_class: m.info.synthetic_per_class,
            accuracy: hits
                .iter()
                .map(|&h| 100.0 * h as f64 / labels.len() as f64)
                .collect(),
        });
        dumps.push(ScoreDump {
            scenario: name.clone(),
            record_ids: test.records.iter().map(|r| r.record_id.clone()).collect(),
            labels: test.records.iter().map(|r| r.label.clone()).collect(),
            scores,
        });
    }
    Ok(Evaluation {
        report: EvalReport {
            ks: ks.to_vec(),
            test_digest: test.digest(),
            test_records: test.len(),
            rows,
            config: Value::Null,
        },
        dumps,
    })
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const SCORES_DIR: &str = "scores";

/// Write report.json, report.csv, report.txt and `scores/<scenario>.csv` under `out`.
pub fn write_evaluation(out: &Path, eval: &Evaluation) -> Result<()> {
    let r = &eval.report;
    write_atomic(
        &out.join(REPORT_JSON),
        r.render(ReportFormat::Json).as_bytes(),
    )?;
    write_atomic(
        &out.join(REPORT_CSV),
        r.render(ReportFormat::Csv).as_bytes(),
    )?;
    write_atomic(
        &out.join(REPORT_TXT),
        r.render(ReportFormat::Plain).as_bytes(),
    )?;
    for d in &eval.dumps {
        write_atomic(
            &out.join(SCORES_DIR).join(format!("{}.csv", d.scenario)),
            d.to_csv().as_bytes(),
        )?;
    }
    Ok(())
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::manifest::ImageRecord;
    use crate::taxonomy::ClassTaxonomy;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn ties_rank_lower_index_first() {
        assert_eq!(rank_of(&[0.5, 0.5, 0.0], 0), 0);
        assert_eq!(rank_of(&[0.5, 0.5, 0.0], 1), 1);
        assert_eq!(rank_of(&[0.1, 0.2, 0.3], 0), 2);
    }

    #[test]
    fn one_hot_is_perfect_and_k_max_is_one() {
        let s = array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        for k in 1..=3 {
            assert_eq!(top_k_accuracy(&s.view(), &[0, 2], k).unwrap(), 1.0);
            assert_eq!(top_k_accuracy(&s.view(), &[1, 1], 3).unwrap(), 1.0);
        }
        assert_eq!(top_k_accuracy(&s.view(), &[1, 1], 1).unwrap(), 0.0);
    }

    #[test]
    fn bad_inputs_are_errors() {
        let s = array![[1.0, 0.0]];
        assert!(top_k_accuracy(&s.view(), &[0, 1], 1).is_err());
        assert!(top_k_accuracy(&s.view(), &[0], 0).is_err());
        assert!(top_k_accuracy(&s.view(), &[0], 3).is_err());
        assert!(top_k_accuracy(&Array2::zeros((0, 2)).view(), &[], 1).is_err());
    }

    fn scores_and_labels() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
        (1usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(
                    prop::collection::vec(prop_oneof![Just(0.25), 0.0..1.0f64], 6),
                    n,
                ),
                prop::collection::vec(0usize..6, n),
            )
        })
    }

    fn to_array(rows: &[Vec<f64>]) -> Array2<f64> {
        Array2::from_shape_vec((rows.len(), 6), rows.concat()).unwrap()
    }

    proptest! {
        #[test]
        fn monotone_in_k((rows, labels) in scores_and_labels()) {
            let s = to_array(&rows);
            let hits = top_k_hits(&s.view(), &labels, &[1, 2, 3, 4, 5, 6]).unwrap();
            prop_assert!(hits.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(hits[5], labels.len());
        }

        #[test]
        fn joint_permutation_and_scaling_invariant((rows, labels) in scores_and_labels(), c in 0.01..100.0f64, rot in 0usize..40) {
            let s = to_array(&rows);
            let n = labels.len();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].iter().map(|v| v * c).collect()).collect();
            let shuffled_labels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let t = to_array(&shuffled);
            for k in 1..=6 {
                prop_assert_eq!(
                    top_k_hits(&s.view(), &labels, &[k]).unwrap(),
                    top_k_hits(&t.view(), &shuffled_labels, &[k]).unwrap()
                );
            }
        }

        #[test]
        fn top1_is_argmax_agreement((rows, labels) in scores_and_labels()) {
            let s = to_array(&rows);
            let agree = rows.iter().zip(&labels).filter(|(r, &l)| crate::scoring::argmax(r) == l).count();
            prop_assert_eq!(top_k_hits(&s.view(), &labels, &[1]).unwrap()[0], agree);
        }
    }

    fn report(rows: Vec<EvalRow>) -> EvalReport {
        EvalReport {
            ks: REPORT_KS.to_vec(),
            test_digest: "t".into(),
            test_records: 10,
            rows,
            config: Value::Null,
        }
    }

    fn row(name: &str, acc: [f64; 5]) -> EvalRow {
        EvalRow {
            scenario: name.into(),
            real_per_class: 1,
            synthetic_per_class: 0,
            accuracy: acc.to_vec(),
        }
    }

    #[test]
    fn empty_report_renders_header_only() {
        let r = report(vec![]);
        assert_eq!(
            r.render(ReportFormat::Csv),
            "real,synthetic,top1,top2,top3,top4,top5\n"
        );
        assert_eq!(r.render(ReportFormat::Plain).lines().count(), 1);
    }

    #[test]
    fn column_maxima_report_ties() {
        let r = report(vec![
            row("a", [50.0, 60.0, 70.0, 92.16, 99.0]),
            row("b", [40.0, 60.0, 80.0, 92.164, 98.0]),
        ]);
        let m = r.column_maxima();
        assert_eq!(m[0].scenarios, ["a"]);
        assert_eq!(m[1].scenarios, ["a", "b"]);
        assert_eq!(m[3].scenarios, ["a", "b"]);
        let plain = r.render(ReportFormat::Plain);
        assert!(
            plain.contains("ties: top-2 (a, b); top-4 (a, b)"),
            "{plain}"
        );
        assert_eq!(plain, r.render(ReportFormat::Plain));
    }

    #[test]
    fn format_names_parse() {
        assert_eq!("csv".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
        assert!("xml".parse::<ReportFormat>().is_err());
    }

    #[test]
    fn score_dump_round_trips_exactly() {
        let d = ScoreDump {
            scenario: "s".into(),
            record_ids: vec!["a".into(), "b".into()],
            labels: vec!["x".into(), "y".into()],
            scores: array![[0.1, 0.9], [1.0 / 3.0, 2.0 / 3.0]],
        };
        assert_eq!(ScoreDump::from_csv("s", &d.to_csv()).unwrap(), d);
    }

    /// Puts all mass on the class stored in the red byte.
    struct Echo;

    impl ImageScorer for Echo {
        fn num_outputs(&self) -> usize {
            6
        }
        fn score_images(&self, images: &[Image]) -> Result<Array2<f64>> {
            let mut s = Array2::zeros((images.len(), 6));
            for (i, im) in images.iter().enumerate() {
                s[[i, im.data[0] as usize]] = 1.0;
            }
            Ok(s)
        }
    }

    fn test_set(dir: &Path) -> Manifest {
        let t = ClassTaxonomy::skin_default();
        let mut m = Manifest::new(t.clone(), "test");
        m.base_dir = dir.to_path_buf();
        for (i, c) in t.ids().enumerate() {
            Image::filled(2, 2, [i as u8, 0, 0])
                .save_png(dir.join(format!("{i}.png")))
                .unwrap();
            m.records
                .push(ImageRecord::real(format!("t{i}"), format!("{i}.png"), c));
        }
        m
    }

    fn info(name: &str, ids: &[&str]) -> ScenarioInfo {
        ScenarioInfo {
            name: name.into(),
            real_per_class: 2,
            synthetic_per_class: 0,
            manifest_digest: String::new(),
            record_ids: ids.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn echo_model_scores_one_hundred() {
        let dir = tempfile::tempdir().unwrap();
        let test = test_set(dir.path());
        let e = evaluate_scenarios(
            &[ScenarioModel {
                info: info("real", &["r1"]),
                scorer: &Echo,
            }],
            &test,
            &REPORT_KS,
        )
        .unwrap();
        assert_eq!(e.report.rows[0].accuracy, vec![100.0; 5]);
        assert_eq!(e.dumps[0].scores.nrows(), 6);
    }

    #[test]
    fn overlap_with_training_set_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let test = test_set(dir.path());
        let r = evaluate_scenarios(
            &[ScenarioModel {
                info: info("real", &["t3"]),
                scorer: &Echo,
            }],
            &test,
            &REPORT_KS,
        );
        assert!(matches!(r, Err(Error::Data(m)) if m.contains("t3")));
    }
}
