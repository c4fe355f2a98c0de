//! Image records and line-delimited manifest files.
//!
//! A manifest file is UTF-8 text. The first line is a header object
//! `{"format_version":1,"taxonomy":[...],"created_by":...,"parent":...}` and
//! every following line is one [`ImageRecord`]. Fields this crate does not
//! know about are kept in `extra` maps and written back unchanged.
//!
//! `image_path` is relative to the directory holding the manifest file; saving
//! a manifest to another directory rewrites the paths so they keep pointing at
//! the same images.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::seed::digest_bytes;
use crate::taxonomy::ClassTaxonomy;

pub const FORMAT_VERSION: u32 = 1;
/// Separator between stage names in `created_by`.
pub const STAGE_SEP: char = '>';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Synthetic,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Real => "real",
            Source::Synthetic => "synthetic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_run_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler_steps: Option<usize>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterScores {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_confidence: Option<f64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub record_id: String,
    pub image_path: String,
    pub label: String,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_scores: Option<FilterScores>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl ImageRecord {
    pub fn real(
        record_id: impl Into<String>,
        image_path: impl Into<String>,
        label: impl Into<String>,
    ) -> Self {
        Self {
            record_id: record_id.into(),
            image_path: image_path.into(),
            label: label.into(),
            source: Source::Real,
            split: None,
            provenance: None,
            filter_scores: None,
            extra: Map::new(),
        }
    }

    pub fn scores_mut(&mut self) -> &mut FilterScores {
        self.filter_scores.get_or_insert_with(FilterScores::default)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    taxonomy: ClassTaxonomy,
    created_by: String,
    #[serde(default)]
    parent: Option<String>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub taxonomy: ClassTaxonomy,
    pub records: Vec<ImageRecord>,
    /// Stage chain that produced this manifest, e.g. `generate>filter-domain`.
    pub created_by: String,
    /// Digest of the manifest this one was derived from.
    pub parent: Option<String>,
    /// Unknown header fields, preserved on save.
    pub extra: Map<String, Value>,
    /// Directory that `image_path` values are relative to.
    pub base_dir: PathBuf,
}

impl PartialEq for Manifest {
    fn eq(&self, other: &Self) -> bool {
        self.taxonomy == other.taxonomy
            && self.records == other.records
            && self.created_by == other.created_by
            && self.parent == other.parent
            && self.extra == other.extra
    }
}

/// Per-class counts in taxonomy order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCounts(Vec<(String, usize)>);

impl ClassCounts {
    pub fn get(&self, class_id: &str) -> usize {
        self.0
            .iter()
            .find(|(c, _)| c == class_id)
            .map_or(0, |(_, n)| *n)
    }

    pub fn total(&self) -> usize {
        self.0.iter().map(|(_, n)| n).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.0.iter().map(|(c, n)| (c.as_str(), *n))
    }

    pub fn values(&self) -> Vec<usize> {
        self.0.iter().map(|(_, n)| *n).collect()
    }
}

impl Serialize for ClassCounts {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for (c, n) in &self.0 {
            m.serialize_entry(c, n)?;
        }
        m.end()
    }
}

impl Manifest {
    pub fn new(taxonomy: ClassTaxonomy, created_by: impl Into<String>) -> Self {
        Self {
            taxonomy,
            records: Vec::new(),
            created_by: created_by.into(),
            parent: None,
            extra: Map::new(),
            base_dir: PathBuf::from("."),
        }
    }

    /// New manifest produced by `stage` from this one: same taxonomy and base
    /// directory, parent set to this manifest's digest, stage appended to the chain.
    pub fn derive(&self, stage: &str, records: Vec<ImageRecord>) -> Self {
        Self {
            taxonomy: self.taxonomy.clone(),
            records,
            created_by: format!("{}{STAGE_SEP}{stage}", self.created_by),
            parent: Some(self.digest()),
            extra: Map::new(),
            base_dir: self.base_dir.clone(),
        }
    }

    pub fn stages(&self) -> impl Iterator<Item = &str> {
        self.created_by.split(STAGE_SEP)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, record: &ImageRecord) -> PathBuf {
        self.base_dir.join(&record.image_path)
    }

    /// Records with image paths rewritten relative to `base`.
    pub fn records_relative_to(&self, base: &Path) -> Result<Vec<ImageRecord>> {
        let from = normalize(&self.base_dir)?;
        let to = normalize(base)?;
        Ok(self
            .records
            .iter()
            .map(|r| ImageRecord {
                image_path: if from == to {
                    r.image_path.clone()
                } else {
                    relative_to(&to, &from.join(&r.image_path))
                },
                ..r.clone()
            })
            .collect())
    }

    pub fn record_ids(&self) -> HashSet<&str> {
        self.records.iter().map(|r| r.record_id.as_str()).collect()
    }

    pub fn class_counts(&self, source: Option<Source>) -> ClassCounts {
        let mut counts: Vec<(String, usize)> =
            self.taxonomy.ids().map(|c| (c.to_string(), 0)).collect();
        for r in &self.records {
            if source.is_some_and(|s| s != r.source) {
                continue;
            }
            if let Some(i) = self.taxonomy.index_of(&r.label) {
                counts[i].1 += 1;
            }
        }
        ClassCounts(counts)
    }

    /// Records grouped by label, in taxonomy order.
    pub fn by_class(&self) -> Vec<Vec<&ImageRecord>> {
        let mut groups = vec![Vec::new(); self.taxonomy.len()];
        for r in &self.records {
            if let Some(i) = self.taxonomy.index_of(&r.label) {
                groups[i].push(r);
            }
        }
        groups
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if r.record_id.is_empty() {
                return Err(Error::data("record with empty record_id"));
            }
            if !seen.insert(r.record_id.as_str()) {
                return Err(Error::data(format!(
                    "duplicate record_id '{}'",
                    r.record_id
                )));
            }
            if self.taxonomy.index_of(&r.label).is_none() {
                return Err(Error::data(format!(
                    "record '{}' has unknown label '{}'",
                    r.record_id, r.label
                )));
            }
            let has_generator = r
                .provenance
                .as_ref()
                .is_some_and(|p| p.generator_run_id.is_some());
            match r.source {
                Source::Synthetic if !has_generator => {
                    return Err(Error::data(format!(
                        "synthetic record '{}' has no generator provenance",
                        r.record_id
                    )))
                }
                Source::Real if has_generator => {
                    return Err(Error::data(format!(
                        "real record '{}' carries generator provenance",
                        r.record_id
                    )))
                }
                _ => {}
            }
            if let Some(fs) = &r.filter_scores {
                for (name, p) in [
                    ("domain_score", fs.domain_score),
                    ("label_confidence", fs.label_confidence),
                ] {
                    if let Some(p) = p {
                        if !(0.0..=1.0).contains(&p) {
                            return Err(Error::data(format!(
                                "record '{}' has {name} {p} outside [0,1]",
                                r.record_id
                            )));
                        }
                    }
                }
                if let Some(pl) = &fs.predicted_label {
                    if self.taxonomy.index_of(pl).is_none() {
                        return Err(Error::data(format!(
                            "record '{}' has unknown predicted_label '{pl}'",
                            r.record_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Serialized form with image paths as stored.
    pub fn to_jsonl(&self) -> String {
        self.render(|p| p.to_string())
    }

    fn render(&self, mut map_path: impl FnMut(&str) -> String) -> String {
        let header = Header {
            format_version: FORMAT_VERSION,
            taxonomy: self.taxonomy.clone(),
            created_by: self.created_by.clone(),
            parent: self.parent.clone(),
            extra: self.extra.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            let mapped;
            let rec = if let Some(p) = Some(map_path(&r.image_path)).filter(|p| *p != r.image_path)
            {
                mapped = ImageRecord {
                    image_path: p,
                    ..r.clone()
                };
                &mapped
            } else {
                r
            };
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Content digest of the serialized manifest.
    pub fn digest(&self) -> String {
        digest_bytes(self.to_jsonl().as_bytes())
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "missing header line".into(),
        })?;
        let header: Header = serde_json::from_str(first).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("bad header: {e}"),
        })?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("unsupported format_version {}", header.format_version),
            });
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ImageRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        let m = Manifest {
            taxonomy: header.taxonomy,
            records,
            created_by: header.created_by,
            parent: header.parent,
            extra: header.extra,
            base_dir: path
                .parent()
                .filter(|d| !d.as_os_str().is_empty())
                .map_or_else(|| PathBuf::from("."), Path::to_path_buf),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Write the manifest to `path`, rebasing image paths onto its directory.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.validate()?;
        let dir = path
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let from = normalize(&self.base_dir)?;
        let to = normalize(dir)?;
        let text = if from == to {
            self.to_jsonl()
        } else {
            self.render(|p| relative_to(&to, &from.join(p)))
        };
        write_atomic(path, text.as_bytes())
    }
}

/// Follow `parent` digests through `manifests`; error if any chain revisits a manifest.
pub fn check_lineage(manifests: &[&Manifest]) -> Result<()> {
    let by_digest: HashMap<String, &Manifest> =
        manifests.iter().map(|m| (m.digest(), *m)).collect();
    for m in manifests {
        let mut visited = HashSet::new();
        let mut cur = Some(m.digest());
        while let Some(d) = cur {
            if !visited.insert(d.clone()) {
                return Err(Error::data(format!("manifest lineage cycle through {d}")));
            }
            cur = by_digest.get(&d).and_then(|m| m.parent.clone());
        }
    }
    Ok(())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn normalize(p: &Path) -> Result<PathBuf> {
    let p = if p.as_os_str().is_empty() {
        Path::new(".")
    } else {
        p
    };
    let abs = std::path::absolute(p).map_err(|e| Error::io(p, e))?;
    let mut out = PathBuf::new();
    for c in abs.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    Ok(out)
}

fn relative_to(dir: &Path, target: &Path) -> String {
    let target = normalize(target).unwrap_or_else(|_| target.to_path_buf());
    let a: Vec<_> = dir.components().collect();
    let b: Vec<_> = target.components().collect();
    let common = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut parts: Vec<String> = vec!["..".into(); a.len() - common];
    parts.extend(
        b[common..]
            .iter()
            .map(|c| c.as_os_str().to_string_lossy().into_owned()),
    );
    parts.join("/")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_per_class() -> Manifest {
        let t = ClassTaxonomy::skin_default();
        let mut m = Manifest::new(t.clone(), "test");
        for (i, c) in t.ids().enumerate() {
            m.records.push(ImageRecord::real(
                format!("r{i}"),
                format!("img/{i}.png"),
                c,
            ));
        }
        m
    }

    #[test]
    fn empty_manifest_parses() {
        let m = Manifest::new(ClassTaxonomy::skin_default(), "empty");
        let back = Manifest::parse(&m.to_jsonl(), Path::new("x.jsonl")).unwrap();
        assert_eq!(back.len(), 0);
        assert!(back.class_counts(None).iter().all(|(_, n)| n == 0));
    }

    #[test]
    fn one_per_class_counts() {
        let m = Manifest::parse(&one_per_class().to_jsonl(), Path::new("x.jsonl")).unwrap();
        let counts = m.class_counts(None);
        assert!(counts.iter().all(|(_, n)| n == 1));
        assert_eq!(counts.total(), 6);
        assert_eq!(m.class_counts(Some(Source::Synthetic)).total(), 0);
    }

    #[test]
    fn duplicate_id_is_named() {
        let mut m = one_per_class();
        m.records[3].record_id = "r0".into();
        let err = Manifest::parse(&m.to_jsonl(), Path::new("x.jsonl")).unwrap_err();
        assert!(err.to_string().contains("'r0'"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let mut text = one_per_class().to_jsonl();
        text.push_str("{not json}\n");
        match Manifest::parse(&text, Path::new("x.jsonl")).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 8),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn probability_out_of_range_rejected() {
        let mut m = one_per_class();
        m.records[0].scores_mut().domain_score = Some(1.5);
        assert!(m.validate().is_err());
    }

    #[test]
    fn provenance_rules() {
        let mut m = one_per_class();
        m.records[0].source = Source::Synthetic;
        assert!(m.validate().is_err());
        m.records[0].provenance = Some(Provenance {
            generator_run_id: Some("run".into()),
            ..Default::default()
        });
        m.validate().unwrap();
        m.records[0].source = Source::Real;
        assert!(m.validate().is_err());
    }

    #[test]
    fn unknown_fields_survive() {
        let text = concat!(
            r#"{"format_version":1,"taxonomy":[{"class_id":"a","display_name":"A","category":"benign"}],"created_by":"x","parent":null,"note":"hi"}"#,
            "\n",
            r#"{"record_id":"1","image_path":"p.png","label":"a","source":"real","camera":"z","filter_scores":{"domain_score":0.5,"extra_score":3}}"#,
            "\n"
        );
        let m = Manifest::parse(text, Path::new("m.jsonl")).unwrap();
        assert_eq!(m.extra["note"], "hi");
        assert_eq!(m.records[0].extra["camera"], "z");
        let again = m.to_jsonl();
        assert!(again.contains("\"camera\":\"z\""));
        assert!(again.contains("\"extra_score\":3"));
        assert_eq!(Manifest::parse(&again, Path::new("m.jsonl")).unwrap(), m);
    }

    #[test]
    fn save_rebases_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = one_per_class();
        m.base_dir = dir.path().join("data");
        let out = dir.path().join("other/deeper/m.jsonl");
        m.save(&out).unwrap();
        let back = Manifest::load(&out).unwrap();
        assert_eq!(back.records[0].image_path, "../../data/img/0.png");
        assert_eq!(
            normalize(&back.image_path(&back.records[0])).unwrap(),
            normalize(&m.image_path(&m.records[0])).unwrap()
        );
    }

    #[test]
    fn derive_links_parent() {
        let m = one_per_class();
        let d = m.derive("filter", m.records[..2].to_vec());
        assert_eq!(d.created_by, "test>filter");
        assert_eq!(d.parent.as_deref(), Some(m.digest().as_str()));
        check_lineage(&[&m, &d]).unwrap();
    }
}
