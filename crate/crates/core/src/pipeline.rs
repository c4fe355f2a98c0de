//! The end-to-end experiment: data, generator, generation, curation,
//! scenarios, ensembles and the evaluation report, with digest-keyed stage
//! caching under one work directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::curation::{curate, write_decisions};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_scenarios, write_evaluation, EvalReport, ScenarioModel, REPORT_KS,
};
use crate::generator::{
    generate_to_manifest, train_denoiser, DenoiserConfig, GeneratorCheckpoint, GeneratorRun,
    GeneratorTrainConfig, ScheduleConfig,
};
use crate::manifest::{write_atomic, Manifest};
use crate::scenarios::{standard_suite, write_suite, SuiteConfig};
use crate::seed::{self, digest_bytes};
use crate::taxonomy::ClassTaxonomy;
use crate::toy::{make_toy_dataset, ToySpec};
use crate::training::domain::{train_domain_scorer, DomainModel};
use crate::training::{train_ensemble, EnsembleModel, TrainConfig};

/// Environment variable that overrides the configured work directory.
pub const WORK_DIR_ENV: &str = "DIFFAUG_WORK_DIR";

const STAGE_FILE: &str = "stage.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDataConfig {
    pub real_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        Self {
            real_per_class: 200,
            test_per_class: 60,
            image_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorStageConfig {
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub train: GeneratorTrainConfig,
    /// Images generated per class.
    pub per_class: usize,
}

impl Default for GeneratorStageConfig {
    fn default() -> Self {
        Self {
            // Scaled-up betas so that x_T is close to pure noise with only 200 steps.
            schedule: ScheduleConfig {
                steps: 200,
                beta_start: 5e-4,
                beta_end: 0.1,
            },
            denoiser: DenoiserConfig {
                height: 16,
                width: 16,
                ..DenoiserConfig::default()
            },
            train: GeneratorTrainConfig::default(),
            per_class: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    pub threshold: f64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSettings {
    pub base_count: usize,
    pub pairing: bool,
}

impl Default for ScenarioSettings {
    fn default() -> Self {
        Self {
            base_count: 100,
            pairing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: REPORT_KS.to_vec(),
        }
    }
}

/// Everything one experiment needs. `seed` fields inside the nested sections
/// are replaced by named substreams of the root `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub work_dir: Option<PathBuf>,
    /// Real-image manifest; a toy set is rendered when absent.
    pub real_manifest: Option<PathBuf>,
    /// Held-out test manifest; required together with `real_manifest`.
    pub test_manifest: Option<PathBuf>,
    pub toy: ToyDataConfig,
    pub generator: GeneratorStageConfig,
    pub curation: CurationConfig,
    pub scenarios: ScenarioSettings,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            work_dir: None,
            real_manifest: None,
            test_manifest: None,
            toy: ToyDataConfig::default(),
            generator: GeneratorStageConfig::default(),
            curation: CurationConfig::default(),
            scenarios: ScenarioSettings::default(),
            train: TrainConfig {
                image_size: 16,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.real_manifest.is_some() != self.test_manifest.is_some() {
            return Err(Error::config(
                "real_manifest and test_manifest must be given together",
            ));
        }
        if self.real_manifest.is_none()
            && (self.toy.real_per_class < 2 || self.toy.test_per_class < 1)
        {
            return Err(Error::config(
                "toy data needs real_per_class >= 2 and test_per_class >= 1",
            ));
        }
        if !(0.0..=1.0).contains(&self.curation.threshold) {
            return Err(Error::config("curation threshold must lie in [0, 1]"));
        }
        if self.eval.ks.is_empty() {
            return Err(Error::config("eval.ks must not be empty"));
        }
        self.generator.denoiser.validate()?;
        self.generator.train.validate()?;
        self.generator.schedule.build()?;
        self.train.validate()?;
        self.suite().specs().map(|_| ())
    }

    /// Work directory: the environment override, then the config value.
    pub fn resolve_work_dir(&self) -> Result<PathBuf> {
        if let Some(dir) = std::env::var_os(WORK_DIR_ENV).filter(|v| !v.is_empty()) {
            return Ok(PathBuf::from(dir));
        }
        self.work_dir.clone().ok_or_else(|| {
            Error::config(format!(
                "no work directory (set work_dir or {WORK_DIR_ENV})"
            ))
        })
    }

    fn stage_seed(&self, stage: &str) -> u64 {
        seed::derive(self.seed, stage, 0)
    }

    pub fn generator_train(&self) -> GeneratorTrainConfig {
        GeneratorTrainConfig {
            seed: self.stage_seed("train-generator"),
            ..self.generator.train
        }
    }

    pub fn classifier_train(&self, stage: &str) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed(stage),
            ..self.train.clone()
        }
    }

    pub fn suite(&self) -> SuiteConfig {
        SuiteConfig {
            base_count: self.scenarios.base_count,
            seed: self.stage_seed("scenario"),
            pairing: self.scenarios.pairing,
        }
    }
}

/// Fixed layout of the work directory.
#[derive(Debug, Clone)]
pub struct WorkDir {
    pub root: PathBuf,
}

impl WorkDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn real_manifest(&self) -> PathBuf {
        self.root.join("data/real/manifest.jsonl")
    }

    pub fn test_manifest(&self) -> PathBuf {
        self.root.join("data/test/manifest.jsonl")
    }

    pub fn generator(&self) -> PathBuf {
        self.root.join("generator/checkpoint.bin")
    }

    pub fn generated_manifest(&self) -> PathBuf {
        self.root.join("generated/manifest.jsonl")
    }

    pub fn domain_scorer(&self) -> PathBuf {
        self.root.join("filters/domain.bin")
    }

    pub fn label_ensemble(&self) -> PathBuf {
        self.root.join("filters/ensemble.bin")
    }

    pub fn curated_dir(&self) -> PathBuf {
        self.root.join("curated")
    }

    pub fn curated_manifest(&self) -> PathBuf {
        self.curated_dir().join("manifest.jsonl")
    }

    pub fn scenarios_dir(&self) -> PathBuf {
        self.root.join("scenarios")
    }

    pub fn ensembles_dir(&self) -> PathBuf {
        self.root.join("ensembles")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
}

/// How a stage ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageOutcome {
    pub stage: String,
    pub cached: bool,
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(digest_bytes(
        &fs::read(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn stage_key(stage: &str, config: &Value, inputs: &[&Path]) -> Result<String> {
    let inputs: Vec<String> = inputs
        .iter()
        .map(|p| file_digest(p))
        .collect::<Result<_>>()?;
    let record = json!({"stage": stage, "config": config, "inputs": inputs});
    Ok(digest_bytes(record.to_string().as_bytes()))
}

/// Runs one stage unless `dir/stage.json` carries the same key and every
/// output exists.
fn run_stage(
    outcomes: &mut Vec<StageOutcome>,
    stage: &str,
    dir: &Path,
    config: Value,
    inputs: &[&Path],
    outputs: &[&Path],
    body: impl FnOnce() -> Result<()>,
) -> Result<()> {
    let wrap = |e: Error| e.in_stage(stage);
    let key = stage_key(stage, &config, inputs).map_err(wrap)?;
    let marker = dir.join(STAGE_FILE);
    let fresh = fs::read_to_string(&marker)
        .ok()
        .and_then(|t| serde_json::from_str::<Value>(&t).ok())
        .is_some_and(|v| v["key"] == json!(key))
        && outputs.iter().all(|p| p.exists());
    if fresh {
        log::info!("[{stage}] up to date");
        outcomes.push(StageOutcome {
            stage: stage.into(),
            cached: true,
        });
        return Ok(());
    }
    let _ = fs::remove_file(&marker);
    let start = Instant::now();
    body().map_err(wrap)?;
    let record = json!({"stage": stage, "key": key, "config": config});
    write_atomic(
        &marker,
        (serde_json::to_string_pretty(&record).unwrap() + "\n").as_bytes(),
    )
    .map_err(wrap)?;
    log::info!("[{stage}] done in {:.1?}", start.elapsed());
    outcomes.push(StageOutcome {
        stage: stage.into(),
        cached: false,
    });
    Ok(())
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub work: WorkDir,
    pub report: EvalReport,
    pub stages: Vec<StageOutcome>,
}

/// Run every stage in order, skipping those whose inputs and config are unchanged.
pub fn run_pipeline(cfg: &ExperimentConfig, work_dir: &Path) -> Result<PipelineResult> {
    cfg.validate()?;
    let w = WorkDir::new(work_dir);
    fs::create_dir_all(&w.root).map_err(|e| Error::io(&w.root, e))?;
    let mut outcomes = Vec::new();

    let (real_path, test_path) = match (&cfg.real_manifest, &cfg.test_manifest) {
        (Some(r), Some(t)) => {
            for p in [r, t] {
                if !p.is_file() {
                    return Err(Error::config(format!(
                        "manifest not found: {}",
                        p.display()
                    )));
                }
            }
            (r.clone(), t.clone())
        }
        _ => {
            let (real, test) = (w.real_manifest(), w.test_manifest());
            let taxonomy = ClassTaxonomy::skin_default();
            let toy = &cfg.toy;
            let specs = [
                (&real, toy.real_per_class, "toy-real", "real"),
                (&test, toy.test_per_class, "toy-test", "test"),
            ];
            run_stage(
                &mut outcomes,
                "make-toy",
                &w.root.join("data"),
                json!({"toy": toy, "seed": cfg.seed}),
                &[],
                &[&real, &test],
                || {
                    for (path, per_class, stream, prefix) in specs {
                        let spec = ToySpec {
                            per_class,
                            seed: cfg.stage_seed(stream),
                            size: toy.image_size,
                            prefix: prefix.into(),
                        };
                        make_toy_dataset(path.parent().unwrap(), &spec, &taxonomy)?;
                    }
                    Ok(())
                },
            )?;
            (real, test)
        }
    };
    let real = Manifest::load(&real_path)?;
    let test = Manifest::load(&test_path)?;
    let overlap = test.record_ids().intersection(&real.record_ids()).count();
    if overlap > 0 {
        return Err(Error::data(format!(
            "test manifest shares {overlap} record(s) with the real manifest"
        )));
    }

    let gen_train = cfg.generator_train();
    run_stage(
        &mut outcomes,
        "train-generator",
        &w.root.join("generator"),
        json!({"schedule": cfg.generator.schedule, "denoiser": cfg.generator.denoiser, "train": gen_train}),
        &[&real_path],
        &[&w.generator()],
        || {
            let schedule = cfg.generator.schedule.build()?;
            let (model, table, curve) =
                train_denoiser(&real, &schedule, cfg.generator.denoiser, &gen_train)?;
            log::info!(
                "[train-generator] smoothed loss {:?} -> {:?}",
                curve.first_smoothed(),
                curve.last_smoothed()
            );
            GeneratorCheckpoint {
                schedule: cfg.generator.schedule,
                taxonomy: real.taxonomy.clone(),
                model,
                table,
                echo: json!({"train": gen_train, "mode": "joint", "final_loss": curve.last_smoothed()}),
            }
            .save(w.generator())
        },
    )?;

    let gen_dir = w.generated_manifest().parent().unwrap().to_path_buf();
    let run = GeneratorRun::uniform(
        "gen",
        cfg.stage_seed("generate"),
        &real.taxonomy,
        cfg.generator.per_class,
        cfg.generator.schedule.steps,
        &gen_dir,
    );
    run_stage(
        &mut outcomes,
        "generate",
        &gen_dir,
        json!({"run_id": run.run_id, "seed": run.seed, "per_class_counts": run.per_class_counts, "sampler_steps": run.sampler_steps}),
        &[&w.generator()],
        &[&w.generated_manifest()],
        || {
            let ckpt = GeneratorCheckpoint::load(w.generator())?;
            generate_to_manifest(&run, &ckpt)?.save(w.generated_manifest())
        },
    )?;

    let domain_cfg = cfg.classifier_train("domain-scorer");
    let gate_cfg = cfg.classifier_train("label-ensemble");
    run_stage(
        &mut outcomes,
        "train-filters",
        &w.root.join("filters"),
        json!({"domain": domain_cfg, "label": gate_cfg}),
        &[&real_path],
        &[&w.domain_scorer(), &w.label_ensemble()],
        || {
            train_domain_scorer(&real, &domain_cfg)?.save(w.domain_scorer())?;
            train_ensemble("label-filter", &real, &gate_cfg)?.save(w.label_ensemble())
        },
    )?;

    let curated_dir = w.curated_dir();
    run_stage(
        &mut outcomes,
        "augment",
        &curated_dir,
        json!({"threshold": cfg.curation.threshold}),
        &[
            &w.generated_manifest(),
            &w.domain_scorer(),
            &w.label_ensemble(),
        ],
        &[&w.curated_manifest()],
        || {
            let generated = Manifest::load(w.generated_manifest())?;
            let scorer = DomainModel::load(w.domain_scorer())?;
            let gate = EnsembleModel::load(w.label_ensemble())?;
            let c = curate(&generated, &scorer, &gate, cfg.curation.threshold)?;
            log::info!(
                "[augment] kept {} of {} (domain {:.3}, label {:.3})",
                c.report.label_accepted_total,
                c.report.input_total,
                c.report.domain_rate,
                c.report.label_rate
            );
            write_decisions(curated_dir.join("decisions.jsonl"), &c.decisions)?;
            write_atomic(
                &curated_dir.join("report.json"),
                c.report.to_json().as_bytes(),
            )?;
            c.manifest.save(w.curated_manifest())
        },
    )?;

    let suite_cfg = cfg.suite();
    let scen_dir = w.scenarios_dir();
    let names: Vec<String> = suite_cfg.specs()?.into_iter().map(|s| s.name).collect();
    let scen_paths: Vec<PathBuf> = names
        .iter()
        .map(|n| scen_dir.join(format!("{n}.jsonl")))
        .collect();
    run_stage(
        &mut outcomes,
        "scenario",
        &scen_dir,
        to_value(&suite_cfg),
        &[&real_path, &w.curated_manifest()],
        &scen_paths.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
        || {
            let curated = Manifest::load(w.curated_manifest())?;
            let suite = standard_suite(&suite_cfg, &real, &curated)?;
            write_suite(&scen_dir, &suite_cfg, &real, &curated, &suite).map(|_| ())
        },
    )?;

    let train_cfg = cfg.classifier_train("train");
    let ens_paths: Vec<PathBuf> = names
        .iter()
        .map(|n| w.ensembles_dir().join(format!("{n}.bin")))
        .collect();
    for ((name, scen), ens) in names.iter().zip(&scen_paths).zip(&ens_paths) {
        run_stage(
            &mut outcomes,
            &format!("train/{name}"),
            &w.ensembles_dir().join(name),
            to_value(&train_cfg),
            &[scen],
            &[ens],
            || {
                let m = Manifest::load(scen)?;
                let e = train_ensemble(name, &m, &train_cfg)?;
                for (member, arch) in e.members.iter().zip(&train_cfg.architectures) {
                    log::info!(
                        "[train/{name}] {arch}: best epoch {}, stopped at {}",
                        member.history.best_epoch,
                        member.history.stopped_epoch
                    );
                }
                e.save(ens)
            },
        )?;
    }

    let eval_dir = w.eval_dir();
    let report_path = eval_dir.join(crate::evaluation::REPORT_JSON);
    let mut inputs: Vec<&Path> = vec![&test_path];
    inputs.extend(ens_paths.iter().map(PathBuf::as_path));
    run_stage(
        &mut outcomes,
        "evaluate",
        &eval_dir,
        json!({"ks": cfg.eval.ks}),
        &inputs,
        &[&report_path],
        || {
            let ensembles = ens_paths
                .iter()
                .map(EnsembleModel::load)
                .collect::<Result<Vec<_>>>()?;
            let models: Vec<ScenarioModel> = ensembles
                .iter()
                .map(|e| ScenarioModel {
                    info: e.scenario.clone(),
                    scorer: e,
                })
                .collect();
            let mut eval = evaluate_scenarios(&models, &test, &cfg.eval.ks)?;
            eval.report.config = json!({
                "seed": cfg.seed,
                "train": train_cfg,
                "suite": suite_cfg,
                "curation": cfg.curation,
                "generator": {"per_class": cfg.generator.per_class, "steps": gen_train.steps},
            });
            write_evaluation(&eval_dir, &eval)
        },
    )?;
    let report = crate::evaluation::load_report(&report_path)?;
    Ok(PipelineResult {
        work: w,
        report,
        stages: outcomes,
    })
}
