//! Balanced training scenarios mixing real and curated synthetic images.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::curation::LABEL_STAGE;
use crate::error::{Error, Result};
use crate::manifest::{write_atomic, ImageRecord, Manifest, Source};
use crate::seed::{derive, keyed_order};

pub const REAL_SMALL: &str = "real-small";
pub const REAL: &str = "real";
pub const HYBRID: &str = "hybrid";
pub const SYNTHETIC: &str = "synthetic";

pub const SUITE_SUMMARY: &str = "suite.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub per_class_real: usize,
    pub per_class_synthetic: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(
        name: impl Into<String>,
        per_class_real: usize,
        per_class_synthetic: usize,
        seed: u64,
    ) -> Self {
        Self {
            name: name.into(),
            per_class_real,
            per_class_synthetic,
            seed,
        }
    }
}

/// Take `count` records per class from `pool` in keyed-hash order, with image
/// paths relative to `base`.
fn draw(
    pool: &Manifest,
    source: Source,
    count: usize,
    seed: u64,
    base: &Path,
) -> Result<Vec<Vec<ImageRecord>>> {
    let mut out = vec![Vec::new(); pool.taxonomy.len()];
    if count == 0 {
        return Ok(out);
    }
    let records = pool.records_relative_to(base)?;
    let by_id: HashMap<&str, &ImageRecord> =
        records.iter().map(|r| (r.record_id.as_str(), r)).collect();
    for (ci, class) in pool.taxonomy.classes().iter().enumerate() {
        let ids: Vec<&str> = records
            .iter()
            .filter(|r| r.source == source && r.label == class.class_id)
            .map(|r| r.record_id.as_str())
            .collect();
        if ids.len() < count {
            return Err(Error::data(format!(
                "class '{}' has {} {source} records, {count} needed (short by {})",
                class.class_id,
                ids.len(),
                count - ids.len()
            )));
        }
        out[ci] = keyed_order(seed, ids)[..count]
            .iter()
            .map(|id| ImageRecord {
                split: None,
                ..by_id[id].clone()
            })
            .collect();
    }
    Ok(out)
}

fn is_curated(m: &Manifest) -> bool {
    m.stages().any(|s| s == LABEL_STAGE)
}

/// Sample a balanced scenario: `per_class_real` real and `per_class_synthetic`
/// synthetic records for every class, without replacement.
///
/// Selection depends only on `(spec.seed, record_id)`, so a smaller spec with
/// the same seed always picks a prefix of what a larger one picks.
pub fn build_scenario(
    spec: &ScenarioSpec,
    real: &Manifest,
    synthetic: &Manifest,
) -> Result<Manifest> {
    if real.taxonomy != synthetic.taxonomy {
        return Err(Error::config(
            "real and synthetic manifests use different taxonomies",
        ));
    }
    if spec.per_class_synthetic > 0 && !is_curated(synthetic) {
        return Err(Error::config(format!(
            "synthetic manifest (created by '{}') has not been through {LABEL_STAGE}",
            synthetic.created_by
        )));
    }
    let base = &real.base_dir;
    let reals = draw(real, Source::Real, spec.per_class_real, spec.seed, base)?;
    let syns = draw(
        synthetic,
        Source::Synthetic,
        spec.per_class_synthetic,
        spec.seed,
        base,
    )?;
    let records = reals
        .into_iter()
        .zip(syns)
        .flat_map(|(r, s)| r.into_iter().chain(s))
        .collect();
    let mut m = real.derive("scenario", records);
    m.extra.insert(
        "scenario".into(),
        serde_json::to_value(spec).expect("spec serializes"),
    );
    if spec.per_class_synthetic > 0 {
        m.extra
            .insert("synthetic_parent".into(), json!(synthetic.digest()));
    }
    m.validate()?;
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub base_count: usize,
    pub seed: u64,
    /// Nest the real sets and share the hybrid's halves with the smaller scenarios.
    #[serde(default = "default_pairing")]
    pub pairing: bool,
}

fn default_pairing() -> bool {
    true
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            base_count: 100,
            seed: 0,
            pairing: true,
        }
    }
}

impl SuiteConfig {
    pub fn specs(&self) -> Result<Vec<ScenarioSpec>> {
        let n = self.base_count;
        if n % 2 != 0 {
            return Err(Error::config(format!(
                "suite base count must be even, got {n}"
            )));
        }
        let seed_for = |name: &str| {
            if self.pairing {
                self.seed
            } else {
                derive(self.seed, name, 0)
            }
        };
        Ok([
            (REAL_SMALL, n / 2, 0),
            (REAL, n, 0),
            (HYBRID, n / 2, n / 2),
            (SYNTHETIC, 0, n),
        ]
        .into_iter()
        .map(|(name, r, s)| ScenarioSpec::new(name, r, s, seed_for(name)))
        .collect())
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub manifest: Manifest,
}

/// The four standard scenarios: real-small (n/2 real), real (n real),
/// hybrid (n/2 + n/2) and synthetic (n synthetic) per class.
pub fn standard_suite(
    cfg: &SuiteConfig,
    real: &Manifest,
    synthetic: &Manifest,
) -> Result<Vec<Scenario>> {
    cfg.specs()?
        .into_iter()
        .map(|spec| {
            let manifest =
                build_scenario(&spec, real, synthetic).map_err(|e| e.in_stage(&spec.name))?;
            Ok(Scenario { spec, manifest })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub name: String,
    pub per_class_real: usize,
    pub per_class_synthetic: usize,
    pub records: usize,
    pub manifest: String,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub config: SuiteConfig,
    pub real_digest: String,
    pub synthetic_digest: String,
    pub scenarios: Vec<ScenarioSummary>,
}

/// Write `<name>.jsonl` per scenario and a `suite.json` summary into `dir`.
pub fn write_suite(
    dir: &Path,
    cfg: &SuiteConfig,
    real: &Manifest,
    synthetic: &Manifest,
    suite: &[Scenario],
) -> Result<SuiteSummary> {
    let mut scenarios = Vec::with_capacity(suite.len());
    for s in suite {
        let file = format!("{}.jsonl", s.spec.name);
        let path = dir.join(&file);
        s.manifest.save(&path)?;
        // Digest of the file as written, with paths rebased onto `dir`.
        let saved = Manifest::load(&path)?;
        scenarios.push(ScenarioSummary {
            name: s.spec.name.clone(),
            per_class_real: s.spec.per_class_real,
            per_class_synthetic: s.spec.per_class_synthetic,
            records: s.manifest.len(),
            manifest: file,
            digest: saved.digest(),
        });
    }
    let summary = SuiteSummary {
        config: *cfg,
        real_digest: real.digest(),
        synthetic_digest: synthetic.digest(),
        scenarios,
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    write_atomic(&dir.join(SUITE_SUMMARY), text.as_bytes())?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::Provenance;
    use crate::taxonomy::ClassTaxonomy;
    use std::collections::HashSet;

    fn pools(real_n: usize, syn_n: usize) -> (Manifest, Manifest) {
        let t = ClassTaxonomy::skin_default();
        let mut real = Manifest::new(t.clone(), "toy");
        let mut gen = Manifest::new(t.clone(), "generate");
        for c in t.ids() {
            for i in 0..real_n {
                real.records.push(ImageRecord::real(
                    format!("r/{c}/{i}"),
                    format!("{c}/{i}.png"),
                    c,
                ));
            }
            for i in 0..syn_n {
                let mut r = ImageRecord::real(format!("s/{c}/{i}"), format!("g/{c}/{i}.png"), c);
                r.source = Source::Synthetic;
                r.provenance = Some(Provenance {
                    generator_run_id: Some("g".into()),
                    ..Default::default()
                });
                gen.records.push(r);
            }
        }
        let curated = gen.derive(crate::curation::DOMAIN_STAGE, gen.records.clone());
        let curated = curated.derive(LABEL_STAGE, curated.records.clone());
        (real, curated)
    }

    fn ids(m: &Manifest, source: Source) -> HashSet<String> {
        m.records
            .iter()
            .filter(|r| r.source == source)
            .map(|r| r.record_id.clone())
            .collect()
    }

    #[test]
    fn smallest_even_suite() {
        let (real, syn) = pools(3, 3);
        let suite = standard_suite(
            &SuiteConfig {
                base_count: 2,
                seed: 1,
                pairing: true,
            },
            &real,
            &syn,
        )
        .unwrap();
        let got: Vec<(usize, usize)> = suite
            .iter()
            .map(|s| {
                (
                    s.manifest.class_counts(Some(Source::Real)).get("melanoma"),
                    s.manifest
                        .class_counts(Some(Source::Synthetic))
                        .get("melanoma"),
                )
            })
            .collect();
        assert_eq!(got, [(1, 0), (2, 0), (1, 1), (0, 2)]);
    }

    #[test]
    fn zero_counts_give_empty_manifest() {
        let (real, syn) = pools(2, 0);
        let m = build_scenario(&ScenarioSpec::new("none", 0, 0, 0), &real, &syn).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn odd_base_count_rejected() {
        let (real, syn) = pools(4, 4);
        let cfg = SuiteConfig {
            base_count: 3,
            seed: 0,
            pairing: true,
        };
        assert!(matches!(
            standard_suite(&cfg, &real, &syn),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn shortfall_names_class() {
        let (real, syn) = pools(4, 4);
        let err = build_scenario(&ScenarioSpec::new("big", 5, 0, 0), &real, &syn).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains(&real.taxonomy.class_at(0).class_id) && msg.contains("short by 1"),
            "{msg}"
        );
    }

    #[test]
    fn uncurated_synthetic_rejected() {
        let (real, syn) = pools(4, 4);
        let raw = Manifest {
            created_by: "generate".into(),
            ..syn.clone()
        };
        assert!(build_scenario(&ScenarioSpec::new("s", 0, 2, 0), &real, &raw).is_err());
        assert!(build_scenario(&ScenarioSpec::new("r", 2, 0, 0), &real, &raw).is_ok());
    }

    #[test]
    fn pairing_nests_and_unpaired_differs() {
        let (real, syn) = pools(40, 40);
        let paired = standard_suite(
            &SuiteConfig {
                base_count: 20,
                seed: 5,
                pairing: true,
            },
            &real,
            &syn,
        )
        .unwrap();
        let small = ids(&paired[0].manifest, Source::Real);
        assert!(small.is_subset(&ids(&paired[1].manifest, Source::Real)));
        assert_eq!(ids(&paired[2].manifest, Source::Real), small);
        assert!(ids(&paired[2].manifest, Source::Synthetic)
            .is_subset(&ids(&paired[3].manifest, Source::Synthetic)));
        let unpaired = standard_suite(
            &SuiteConfig {
                base_count: 20,
                seed: 5,
                pairing: false,
            },
            &real,
            &syn,
        )
        .unwrap();
        assert_ne!(
            ids(&unpaired[2].manifest, Source::Real),
            ids(&unpaired[0].manifest, Source::Real)
        );
    }

    #[test]
    fn selection_ignores_pool_order() {
        let (real, syn) = pools(10, 0);
        let mut shuffled = real.clone();
        shuffled.records.reverse();
        let spec = ScenarioSpec::new("r", 4, 0, 9);
        let a = build_scenario(&spec, &real, &syn).unwrap();
        let b = build_scenario(&spec, &shuffled, &syn).unwrap();
        assert_eq!(ids(&a, Source::Real), ids(&b, Source::Real));
    }

    #[test]
    fn synthetic_paths_are_rebased() {
        let (mut real, mut syn) = pools(2, 2);
        real.base_dir = "/data/real".into();
        syn.base_dir = "/data/gen".into();
        let m = build_scenario(&ScenarioSpec::new("h", 1, 1, 0), &real, &syn).unwrap();
        let s = m
            .records
            .iter()
            .find(|r| r.source == Source::Synthetic)
            .unwrap();
        assert!(s.image_path.starts_with("../gen/g/"), "{}", s.image_path);
    }
}
