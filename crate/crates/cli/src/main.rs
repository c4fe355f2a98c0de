use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use diffaug::curation::{curate, domain_filter, label_filter, write_decisions, FilterDecision};
use diffaug::evaluation::{
    evaluate_scenarios, load_report, write_evaluation, ReportFormat, ScenarioModel, REPORT_KS,
};
use diffaug::generator::{
    generate_to_manifest, train_denoiser, train_embeddings, GeneratorCheckpoint, GeneratorRun,
    GeneratorTrainConfig,
};
use diffaug::pipeline::{run_pipeline, ExperimentConfig, GeneratorStageConfig, WORK_DIR_ENV};
use diffaug::scenarios::{standard_suite, write_suite, SuiteConfig};
use diffaug::toy::{make_toy_dataset, ToySpec};
use diffaug::training::domain::{train_domain_scorer, DomainModel};
use diffaug::training::{train_ensemble, EnsembleModel, TrainConfig};
use diffaug::{ClassTaxonomy, Error, Manifest, Result};

#[derive(Parser)]
#[command(
    name = "diffaug",
    version,
    about = "Diffusion-based data augmentation experiments"
)]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural six-class toy dataset with a real-source manifest.
    MakeToy(MakeToyArgs),
    /// Train denoiser weights and class embeddings jointly.
    TrainGenerator(TrainGeneratorArgs),
    /// Learn class embeddings only, keeping a trained denoiser frozen.
    TrainEmbeddings(TrainEmbeddingsArgs),
    /// Sample images for each class into a synthetic-source manifest.
    Generate(GenerateArgs),
    /// Keep records the domain scorer accepts.
    FilterDomain(FilterDomainArgs),
    /// Keep records whose ensemble top-1 prediction matches their label.
    FilterLabel(FilterLabelArgs),
    /// Run both filters and write the curated manifest with its report.
    Augment(AugmentArgs),
    /// Build the real-small, real, hybrid and synthetic scenarios.
    Scenario(ScenarioArgs),
    /// Train a classifier ensemble (or a domain scorer) on a manifest.
    Train(TrainArgs),
    /// Score ensembles on a test manifest and write the top-k report.
    Evaluate(EvaluateArgs),
    /// Render a saved report.
    Report(ReportArgs),
    /// Run the whole experiment end to end in a work directory.
    ReproduceToy(ReproduceArgs),
}

#[derive(Args)]
struct MakeToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    size: usize,
    /// Record-id prefix.
    #[arg(long, default_value = "toy")]
    prefix: String,
}

#[derive(Args)]
struct TrainGeneratorArgs {
    /// Training manifest.
    #[arg(long)]
    train: PathBuf,
    /// JSON with `schedule`, `denoiser` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainEmbeddingsArgs {
    /// Checkpoint holding the frozen denoiser.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    train: PathBuf,
    /// Generator training JSON (steps, lr, batch_size, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Generation JSON: run_id, seed, per_class_counts, sampler_steps, out_dir.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Manifest to write (default `<out_dir>/<run_id>.jsonl`).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct FilterDomainArgs {
    #[arg(long)]
    input: PathBuf,
    /// Domain scorer checkpoint (see `train --kind domain`).
    #[arg(long)]
    scorer: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
    /// Decisions file (default: next to the output, `.decisions.jsonl`).
    #[arg(long)]
    decisions: Option<PathBuf>,
}

#[derive(Args)]
struct FilterLabelArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    ensemble: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    decisions: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    /// Generated manifest.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    scorer: PathBuf,
    #[arg(long)]
    ensemble: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Directory for manifest.jsonl, report.json and decisions.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long)]
    real: PathBuf,
    /// Curated synthetic manifest.
    #[arg(long)]
    synthetic: PathBuf,
    /// Suite JSON: base_count, seed, pairing.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    base_count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Draw each scenario independently instead of nesting them.
    #[arg(long)]
    no_pairing: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Ensemble,
    Domain,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Name recorded in the checkpoint (default: manifest file stem).
    #[arg(long)]
    name: Option<String>,
    #[arg(long, value_enum, default_value = "ensemble")]
    kind: ModelKind,
    /// Output directory; the checkpoint is `<out>/<name>.bin`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of ensemble checkpoints (`*.bin`).
    #[arg(long)]
    ensembles: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = REPORT_KS)]
    ks: Vec<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Plain,
    Csv,
    Json,
}

#[derive(Args)]
struct ReportArgs {
    /// report.json written by `evaluate`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "plain")]
    format: Format,
}

#[derive(Args)]
struct ReproduceArgs {
    /// Experiment JSON (default: the desk-scale toy experiment).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Work directory (overrides the config and the environment).
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn read_json_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn decisions_path(explicit: Option<PathBuf>, out: &Path) -> PathBuf {
    explicit.unwrap_or_else(|| out.with_extension("decisions.jsonl"))
}

fn summarize(decisions: &[FilterDecision]) {
    let kept = decisions.iter().filter(|d| d.accepted).count();
    log::info!("accepted {kept} of {}", decisions.len());
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::MakeToy(a) => {
            let spec = ToySpec {
                per_class: a.per_class,
                seed: a.seed,
                size: a.size,
                prefix: a.prefix,
            };
            let m = make_toy_dataset(&a.out, &spec, &ClassTaxonomy::skin_default())?;
            log::info!("wrote {} images to {}", m.len(), a.out.display());
        }
        Command::TrainGenerator(a) => {
            let cfg: GeneratorStageConfig = read_json_or_default(a.config.as_deref())?;
            let train_cfg = GeneratorTrainConfig {
                seed: a.seed.unwrap_or(cfg.train.seed),
                ..cfg.train
            };
            let m = Manifest::load(&a.train)?;
            let (model, table, curve) =
                train_denoiser(&m, &cfg.schedule.build()?, cfg.denoiser, &train_cfg)?;
            log::info!(
                "smoothed loss {:?} -> {:?}",
                curve.first_smoothed(),
                curve.last_smoothed()
            );
            GeneratorCheckpoint {
                schedule: cfg.schedule,
                taxonomy: m.taxonomy.clone(),
                model,
                table,
                echo: serde_json::json!({"mode": "joint", "train": train_cfg, "train_manifest": m.digest()}),
            }
            .save(&a.out)?;
        }
        Command::TrainEmbeddings(a) => {
            let base = GeneratorCheckpoint::load(&a.checkpoint)?;
            let cfg: GeneratorTrainConfig = read_json_or_default(a.config.as_deref())?;
            let cfg = GeneratorTrainConfig {
                seed: a.seed.unwrap_or(cfg.seed),
                ..cfg
            };
            let m = Manifest::load(&a.train)?;
            let init = base.table.extended(
                &m.taxonomy,
                diffaug::seed::derive(cfg.seed, "embeddings", 0),
            );
            let (table, curve) =
                train_embeddings(&base.model, &init, &m, &base.noise_schedule()?, &cfg)?;
            log::info!(
                "smoothed loss {:?} -> {:?}",
                curve.first_smoothed(),
                curve.last_smoothed()
            );
            GeneratorCheckpoint {
                taxonomy: m.taxonomy.clone(),
                table,
                echo: serde_json::json!({"mode": "embeddings", "train": cfg, "base": base.echo, "train_manifest": m.digest()}),
                ..base
            }
            .save(&a.out)?;
        }
        Command::Generate(a) => {
            let ckpt = GeneratorCheckpoint::load(&a.checkpoint)?;
            let mut run: GeneratorRun = read_json(&a.config)?;
            if let Some(s) = a.seed {
                run.seed = s;
            }
            let m = generate_to_manifest(&run, &ckpt)?;
            let path = a
                .manifest
                .unwrap_or_else(|| run.out_dir.join(format!("{}.jsonl", run.run_id)));
            m.save(&path)?;
            log::info!("wrote {} images, manifest {}", m.len(), path.display());
        }
        Command::FilterDomain(a) => {
            let m = Manifest::load(&a.input)?;
            let scorer = DomainModel::load(&a.scorer)?;
            let (out, decisions) = domain_filter(&m, &scorer, a.threshold)?;
            write_decisions(decisions_path(a.decisions, &a.out), &decisions)?;
            out.save(&a.out)?;
            summarize(&decisions);
        }
        Command::FilterLabel(a) => {
            let m = Manifest::load(&a.input)?;
            let ensemble = EnsembleModel::load(&a.ensemble)?;
            let (out, decisions) = label_filter(&m, &ensemble)?;
            write_decisions(decisions_path(a.decisions, &a.out), &decisions)?;
            out.save(&a.out)?;
            summarize(&decisions);
        }
        Command::Augment(a) => {
            let m = Manifest::load(&a.input)?;
            let scorer = DomainModel::load(&a.scorer)?;
            let ensemble = EnsembleModel::load(&a.ensemble)?;
            let c = curate(&m, &scorer, &ensemble, a.threshold)?;
            write_decisions(a.out.join("decisions.jsonl"), &c.decisions)?;
            std::fs::write(a.out.join("report.json"), c.report.to_json())
                .map_err(|e| Error::io(a.out.join("report.json"), e))?;
            c.manifest.save(a.out.join("manifest.jsonl"))?;
            log::info!(
                "kept {} of {} (domain rate {:.4}, label rate {:.4})",
                c.report.label_accepted_total,
                c.report.input_total,
                c.report.domain_rate,
                c.report.label_rate
            );
        }
        Command::Scenario(a) => {
            let mut cfg: SuiteConfig = read_json_or_default(a.config.as_deref())?;
            if let Some(n) = a.base_count {
                cfg.base_count = n;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if a.no_pairing {
                cfg.pairing = false;
            }
            let real = Manifest::load(&a.real)?;
            let synthetic = Manifest::load(&a.synthetic)?;
            let suite = standard_suite(&cfg, &real, &synthetic)?;
            write_suite(&a.out, &cfg, &real, &synthetic, &suite)?;
        }
        Command::Train(a) => {
            let cfg: TrainConfig = read_json_or_default(a.config.as_deref())?;
            let cfg = TrainConfig {
                seed: a.seed.unwrap_or(cfg.seed),
                ..cfg
            };
            let m = Manifest::load(&a.scenario)?;
            let name = a.name.unwrap_or_else(|| {
                a.scenario
                    .file_stem()
                    .map_or("scenario".into(), |s| s.to_string_lossy().into_owned())
            });
            let out = a.out.join(format!("{name}.bin"));
            match a.kind {
                ModelKind::Ensemble => {
                    let e = train_ensemble(&name, &m, &cfg)?;
                    for (member, arch) in e.members.iter().zip(&cfg.architectures) {
                        log::info!(
                            "{arch}: best epoch {}, stopped at {}",
                            member.history.best_epoch,
                            member.history.stopped_epoch
                        );
                    }
                    e.save(&out)?;
                }
                ModelKind::Domain => train_domain_scorer(&m, &cfg)?.save(&out)?,
            }
            log::info!("wrote {}", out.display());
        }
        Command::Evaluate(a) => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&a.ensembles)
                .map_err(|e| Error::io(&a.ensembles, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "bin"))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(Error::config(format!(
                    "no ensemble checkpoints (*.bin) in {}",
                    a.ensembles.display()
                )));
            }
            let ensembles = paths
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
            let test = Manifest::load(&a.test)?;
            let eval = evaluate_scenarios(&models, &test, &a.ks)?;
            write_evaluation(&a.out, &eval)?;
            print!("{}", eval.report.render(ReportFormat::Plain));
        }
        Command::Report(a) => {
            let report = load_report(&a.input)?;
            let format = match a.format {
                Format::Plain => ReportFormat::Plain,
                Format::Csv => ReportFormat::Csv,
                Format::Json => ReportFormat::Json,
            };
            print!("{}", report.render(format));
        }
        Command::ReproduceToy(a) => {
            let mut cfg: ExperimentConfig = match &a.config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let work = match a.work_dir {
                Some(w) => w,
                None => cfg.resolve_work_dir().map_err(|_| {
                    Error::config(format!(
                        "no work directory: pass --work-dir or set {WORK_DIR_ENV}"
                    ))
                })?,
            };
            let result = run_pipeline(&cfg, &work)?;
            let cached = result.stages.iter().filter(|s| s.cached).count();
            log::info!("{} stages, {cached} up to date", result.stages.len());
            print!("{}", result.report.render(ReportFormat::Plain));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet {
        "warn"
    } else {
        "info"
    }))
    .format_timestamp(None)
    .init();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
