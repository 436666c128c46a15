use std::path::{Path, PathBuf};

use mammoclip::checkpoint::Checkpoint;
use mammoclip::curation::{self, FoldAssignment, Shortfall, UndersamplePlan};
use mammoclip::density::{ClassPromptSet, Density};
use mammoclip::evaluation::{zero_shot_classify, EvaluationReport};
use mammoclip::grid::Grid;
use mammoclip::image_io::read_png;
use mammoclip::kv::KvFile;
use mammoclip::manifest::Manifest;
use mammoclip::model::{DualEncoderConfig, DualEncoderModel};
use mammoclip::objective::ClassWeights;
use mammoclip::phantom::{DatasetSpec, DensityRanges, IntensityProfile};
use mammoclip::pipeline::{self, prepare_image, ItemError};
use mammoclip::saliency::{self, SaliencyTarget, DEFAULT_ALPHA};
use mammoclip::training::{self, AggregateReport, Dataset, FoldSummary, TrainConfig};
use mammoclip::util::{read, write_atomic};
use mammoclip::{Error, Result};
use rayon::prelude::*;
use serde_json::json;

use crate::rundir::{RunDir, SUMMARY};
use crate::{Cli, Command, Preset, Target};

const DEFAULT_RUN_DIR: &str = "runs";

/// Effective settings: command-line flags over the config file over
/// defaults.
#[derive(Debug, Default)]
struct Settings {
    seed: u64,
    jobs: Option<usize>,
    run_dir: PathBuf,
    split_k: usize,
    split_targets: Option<String>,
    split_strict: bool,
    train: KvFile,
    gradcam_alpha: f64,
    gradcam_target: SaliencyTarget,
}

fn read_kv(path: &Path) -> Result<KvFile> {
    let bytes = read(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| Error::Config(format!("{}: not UTF-8: {e}", path.display())))?;
    KvFile::parse(text).map_err(|e| in_config(path, e))
}

/// Problems inside configuration files are configuration errors.
fn in_config(path: &Path, e: Error) -> Error {
    match e {
        Error::Line { line, message } => Error::Config(format!("{}: line {line}: {message}", path.display())),
        Error::Data(m) | Error::Format { detail: m, .. } => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// Config file keys: `seed`, `jobs`, `run_dir`, `split.k`,
/// `split.targets`, `split.strict`, `train.*` (training keys) and
/// `gradcam.alpha`, `gradcam.target`.
fn settings(cli: &Cli) -> Result<Settings> {
    let path = cli.global.config.as_deref().unwrap_or(Path::new("<none>"));
    read_settings(cli).map_err(|e| in_config(path, e))
}

fn read_settings(cli: &Cli) -> Result<Settings> {
    let file = match &cli.global.config {
        Some(p) => read_kv(p)?,
        None => KvFile::new(),
    };
    let mut r = file.reader();
    let seed = r.get_or("seed", 0u64)?;
    let jobs = r.get("jobs")?;
    let run_dir = r.get::<String>("run_dir")?;
    let split_k = r.get_or("split.k", 5usize)?;
    let split_targets = r.get("split.targets")?;
    let split_strict = r.get_or("split.strict", false)?;
    let gradcam_alpha = r.get_or("gradcam.alpha", DEFAULT_ALPHA)?;
    let gradcam_target = match r.get::<String>("gradcam.target")?.as_deref() {
        None | Some("similarity") => SaliencyTarget::Similarity,
        Some("probability") => SaliencyTarget::Probability,
        Some(other) => return Err(Error::Config(format!("unknown gradcam.target {other:?}"))),
    };
    let mut train = KvFile::new();
    for (k, v) in r.section("train") {
        if k == "seed" {
            return Err(Error::Config("train.seed is not allowed; use the top-level seed".into()));
        }
        train.push(&k, v)?;
    }
    r.finish()?;

    let g = &cli.global;
    Ok(Settings {
        seed: g.seed.unwrap_or(seed),
        jobs: g.jobs.or(jobs),
        run_dir: g
            .run_dir
            .clone()
            .or(run_dir.map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_DIR)),
        split_k,
        split_targets,
        split_strict,
        train,
        gradcam_alpha,
        gradcam_target,
    })
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf()
}

fn image_list(manifest: &Manifest) -> Vec<&str> {
    manifest.records.iter().map(|r| r.image_path.as_str()).collect()
}

fn labels(manifest: &Manifest) -> Vec<usize> {
    manifest.records.iter().map(|r| r.density.index()).collect()
}

fn parse_targets(text: &str) -> Result<[usize; Density::COUNT]> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| Error::Config(format!("target {s:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    match parts.as_slice() {
        [n] => Ok([*n; Density::COUNT]),
        _ => parts
            .try_into()
            .map_err(|_| Error::Config("targets need one count or four comma-separated counts".into())),
    }
}

fn partial_failure(failures: &[ItemError], total: usize) -> Result<()> {
    if failures.is_empty() {
        return Ok(());
    }
    for f in failures {
        eprintln!("failed: {}: {}", f.item, f.error);
    }
    Err(Error::Data(format!("{} of {total} items failed", failures.len())))
}

pub fn run(cli: Cli) -> Result<()> {
    let s = settings(&cli)?;
    if let Some(jobs) = s.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let out = cli
        .global
        .out
        .clone()
        .unwrap_or_else(|| s.run_dir.join(cli.command.name()));
    let mut run = RunDir::create(&out, cli.global.overwrite)?;
    let arguments: Vec<String> = std::env::args().collect();
    let name = cli.command.name();
    let (summary, config, outcome) = dispatch(cli.command, &s, cli.global.seed, &mut run)?;
    run.write_json(SUMMARY, &summary)?;
    run.finish(name, &arguments, s.seed, &config)?;
    outcome
}

type Dispatched = (serde_json::Value, String, Result<()>);

fn dispatch(command: Command, s: &Settings, seed_flag: Option<u64>, run: &mut RunDir) -> Result<Dispatched> {
    match command {
        Command::Generate {
            spec,
            classes,
            per_class,
            preset,
            name,
        } => generate(s, seed_flag, run, spec, classes, per_class, preset, &name),
        Command::Preprocess { manifest } => preprocess(run, &manifest),
        Command::Split {
            manifest,
            k,
            targets,
            strict,
        } => split(s, run, &manifest, k, targets, strict),
        Command::Train {
            manifest,
            folds,
            fold,
            epochs,
            batch_size,
            learning_rate,
        } => train(s, run, &manifest, &folds, fold, epochs, batch_size, learning_rate),
        Command::Evaluate {
            checkpoint,
            manifest,
            folds,
            fold,
            audit_split,
        } => evaluate(run, checkpoint.as_deref(), &manifest, folds.as_deref(), fold, audit_split.as_deref()),
        Command::ZeroShot { checkpoint, manifest } => zero_shot(run, &checkpoint, &manifest),
        Command::Gradcam {
            checkpoint,
            manifest,
            class,
            limit,
            target,
            alpha,
        } => gradcam(s, run, &checkpoint, &manifest, class, limit, target, alpha),
    }
}

#[allow(clippy::too_many_arguments)]
fn generate(
    s: &Settings,
    seed_flag: Option<u64>,
    run: &mut RunDir,
    spec: Option<PathBuf>,
    classes: usize,
    per_class: usize,
    preset: Preset,
    name: &str,
) -> Result<Dispatched> {
    let spec = match spec {
        Some(path) => {
            run.record_input("spec", &path)?;
            let mut spec = DatasetSpec::from_kv(&read_kv(&path)?).map_err(|e| in_config(&path, e))?;
            if let Some(seed) = seed_flag {
                spec.seed = seed;
            }
            spec
        }
        None => {
            if !(1..=Density::COUNT).contains(&classes) {
                return Err(Error::Config(format!("--classes must be 1..=4, got {classes}")));
            }
            let mut spec = DatasetSpec::new(name, per_class, s.seed);
            spec.per_class[classes..].iter_mut().for_each(|n| *n = 0);
            match preset {
                Preset::Standard => {}
                Preset::Overlapping => spec.ranges = DensityRanges::overlapping(),
                Preset::Shifted => {
                    spec.profile = IntensityProfile::shifted();
                    spec.text_rate = 0.8;
                    spec.paddle_rate = 0.4;
                    spec.implant_rate = 0.15;
                    spec.clip_rate = 0.3;
                }
            }
            spec
        }
    };
    let config = spec.to_kv().to_string();
    let (phantoms, manifest) = spec.generate()?;
    pipeline::write_dataset(&run.path, &phantoms, &manifest)?;
    write_atomic(&run.join("spec.kv"), config.as_bytes())?;
    let summary = json!({
        "dataset": spec.name,
        "images": manifest.len(),
        "class_counts": manifest.class_counts(),
        "patients": manifest.patients().len(),
        "longitudinal_patients": manifest.longitudinal_patients().len(),
        "manifest": "manifest.jsonl",
    });
    Ok((summary, config, Ok(())))
}

fn preprocess(run: &mut RunDir, manifest_path: &Path) -> Result<Dispatched> {
    let manifest = Manifest::load(manifest_path)?;
    let base = base_dir(manifest_path);
    run.record_input("manifest", manifest_path)?;
    let (kept, failures) = pipeline::preprocess_dataset(&manifest, &base, &run.path)?;
    let summary = json!({
        "input_images": manifest.len(),
        "output_images": kept.len(),
        "manifest": "manifest.jsonl",
        "failures": failures,
    });
    let outcome = partial_failure(&failures, manifest.len());
    Ok((summary, String::new(), outcome))
}

fn split(
    s: &Settings,
    run: &mut RunDir,
    manifest_path: &Path,
    k: Option<usize>,
    targets: Option<String>,
    strict: bool,
) -> Result<Dispatched> {
    let manifest = Manifest::load(manifest_path)?;
    run.record_input("manifest", manifest_path)?;
    let k = k.unwrap_or(s.split_k);
    let strict = strict || s.split_strict;
    let targets = targets.or_else(|| s.split_targets.clone());
    let mut config = KvFile::new();
    config.push("seed", s.seed)?;
    config.push("split.k", k)?;
    config.push("split.strict", strict)?;

    let mut curated = match &targets {
        Some(t) => {
            config.push("split.targets", t)?;
            let plan = UndersamplePlan {
                targets: parse_targets(t)?,
                seed: s.seed,
                shortfall: if strict { Shortfall::Strict } else { Shortfall::TakeAll },
            };
            curation::undersample(&manifest, &plan)?
        }
        None => manifest.clone(),
    };
    let weights = curation::class_weights(&curated)?;
    let folds = curation::stratified_group_kfold(&curated, k, s.seed)?;
    let audit = folds.audit(&curated)?;
    if !audit.within_tolerance {
        eprintln!(
            "warning: fold class shares deviate by up to {:.0}% from the overall shares",
            audit.max_relative_deviation * 100.0
        );
    }

    // The curated manifest lives in the run directory, so point it back at
    // the original images.
    let base = base_dir(manifest_path)
        .canonicalize()
        .map_err(|e| Error::Io {
            path: manifest_path.into(),
            source: e,
        })?;
    for r in &mut curated.records {
        r.image_path = base.join(&r.image_path).display().to_string();
    }
    curated.write(&run.join("manifest.jsonl"))?;
    folds.write(&run.join("folds.json"))?;
    let weights_json = json!({
        "classes": Density::ALL.map(|d| d.letter()),
        "counts": curated.class_counts(),
        "weights": weights.as_slice(),
    });
    run.write_json("weights.json", &weights_json)?;
    let summary = json!({
        "images": curated.len(),
        "class_counts": curated.class_counts(),
        "class_weights": weights.as_slice(),
        "audit": audit,
        "folds": "folds.json",
        "manifest": "manifest.jsonl",
    });
    Ok((summary, config.to_string(), Ok(())))
}

#[allow(clippy::too_many_arguments)]
fn train(
    s: &Settings,
    run: &mut RunDir,
    manifest_path: &Path,
    folds_path: &Path,
    fold: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
) -> Result<Dispatched> {
    let mut config = TrainConfig::from_kv(&s.train)?;
    config.seed = s.seed;
    config.epochs = epochs.unwrap_or(config.epochs);
    config.batch_size = batch_size.unwrap_or(config.batch_size);
    config.learning_rate = learning_rate.unwrap_or(config.learning_rate);
    if config.checkpoint_dir.take().is_some() {
        eprintln!("warning: train.checkpoint_dir is ignored; checkpoints go to the run directory");
    }
    config.validate()?;

    let manifest = Manifest::load(manifest_path)?;
    let folds = FoldAssignment::load(folds_path)?;
    let base = base_dir(manifest_path);
    run.record_input("manifest", manifest_path)?;
    run.record_input("folds", folds_path)?;
    run.record_inputs("images", &base, &image_list(&manifest))?;
    let images = pipeline::load_images(&manifest, &base)?;
    let labels = labels(&manifest);
    let data = Dataset::new(&images, &labels)?;
    let prompts = ClassPromptSet::default();
    let init = DualEncoderModel::new(DualEncoderConfig::for_prompts(&prompts), s.seed)?;

    let aggregate = match fold {
        None => training::cross_validate(&manifest, data, &folds, &init, &prompts, &config, Some(&run.path))?.aggregate,
        Some(f) => {
            folds.audit(&manifest)?;
            let (tr, val) = folds.indices(&manifest, f)?;
            let weights = ClassWeights::from_manifest(&manifest.select(&tr))?;
            let ckpt = run.join(format!("fold{f}.ckpt"));
            let outcome = training::train_fold(&init, data, &tr, &val, &prompts, &weights, &config, Some(&ckpt))?;
            write_atomic(&run.join(format!("fold{f}.log.jsonl")), outcome.log.to_jsonl().as_bytes())?;
            let val_images: Vec<Grid> = val.iter().map(|&i| images[i].clone()).collect();
            let val_labels: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
            let report =
                EvaluationReport::evaluate(&outcome.best, &val_images, &val_labels, &prompts, &format!("fold{f}"))?;
            let aggregate = AggregateReport::new(vec![FoldSummary {
                fold: f,
                best_epoch: outcome.best_epoch,
                train_images: tr.len(),
                report,
            }]);
            write_atomic(&run.join("aggregate.json"), aggregate.to_json().as_bytes())?;
            aggregate
        }
    };
    let summary = json!({
        "folds": aggregate.folds.iter().map(|f| json!({
            "fold": f.fold,
            "best_epoch": f.best_epoch,
            "checkpoint": format!("fold{}.ckpt", f.fold),
            "accuracy": f.report.summary.overall_accuracy,
            "per_class_auc": f.report.per_class_auc,
        })).collect::<Vec<_>>(),
        "accuracy": aggregate.accuracy,
        "per_class_auc": aggregate.per_class_auc,
        "aggregate": "aggregate.json",
    });
    Ok((summary, config.to_kv().to_string(), Ok(())))
}

fn evaluate(
    run: &mut RunDir,
    checkpoint: Option<&Path>,
    manifest_path: &Path,
    folds_path: Option<&Path>,
    fold: Option<usize>,
    audit_split: Option<&Path>,
) -> Result<Dispatched> {
    if checkpoint.is_none() && audit_split.is_none() {
        return Err(Error::Config("evaluate needs --checkpoint, --audit-split, or both".into()));
    }
    let manifest = Manifest::load(manifest_path)?;
    run.record_input("manifest", manifest_path)?;
    let mut summary = serde_json::Map::new();
    let mut outcome = Ok(());

    if let Some(path) = audit_split {
        run.record_input("split", path)?;
        let folds = FoldAssignment::load(path)?;
        let value = match folds.audit(&manifest) {
            Ok(audit) => json!({ "passed": true, "leakage": false, "audit": audit }),
            Err(e @ Error::Data(_)) => {
                let value = json!({ "passed": false, "leakage": true, "error": e.to_string() });
                outcome = Err(e);
                value
            }
            Err(e) => return Err(e),
        };
        run.write_json("audit.json", &value)?;
        summary.insert("split_audit".into(), value);
    }

    if let Some(path) = checkpoint {
        run.record_input("checkpoint", path)?;
        let ck = Checkpoint::load(path)?;
        let (subset, dataset) = match (folds_path, fold) {
            (Some(fp), Some(f)) => {
                let folds = FoldAssignment::load(fp)?;
                let (_, val) = folds.indices(&manifest, f)?;
                (manifest.select(&val), format!("fold{f}"))
            }
            _ => (manifest.clone(), manifest.source.dataset.clone()),
        };
        let base = base_dir(manifest_path);
        let images = pipeline::load_images(&subset, &base)?;
        let report = EvaluationReport::evaluate(&ck.model, &images, &labels(&subset), &ck.prompts, &dataset)?;
        report.write(&run.join("report.json"), &run.join("confusion.csv"))?;
        summary.insert(
            "evaluation".into(),
            json!({
                "samples": report.samples,
                "accuracy": report.summary.overall_accuracy,
                "per_class_auc": report.per_class_auc,
                "report": "report.json",
                "confusion": "confusion.csv",
            }),
        );
    }
    Ok((summary.into(), String::new(), outcome))
}

fn predictions_csv(manifest: &Manifest, scores: &[Vec<f64>], predicted: &[usize]) -> String {
    let mut out = String::from("image_path,label,predicted,score_A,score_B,score_C,score_D\n");
    for ((r, s), &p) in manifest.records.iter().zip(scores).zip(predicted) {
        out += &format!("{},{},{}", r.image_path, r.density, Density::ALL[p]);
        for v in s {
            out += &format!(",{v:.6}");
        }
        out.push('\n');
    }
    out
}

fn zero_shot(run: &mut RunDir, checkpoint: &Path, manifest_path: &Path) -> Result<Dispatched> {
    let manifest = Manifest::load(manifest_path)?;
    let base = base_dir(manifest_path);
    run.record_input("checkpoint", checkpoint)?;
    run.record_input("manifest", manifest_path)?;
    let ck = Checkpoint::load(checkpoint)?;

    let prepared: Vec<Result<Grid>> = manifest
        .records
        .par_iter()
        .map(|r| prepare_image(&read_png(&base.join(&r.image_path))?))
        .collect();
    let (mut keep, mut images, mut failures) = (Vec::new(), Vec::new(), Vec::new());
    for (i, p) in prepared.into_iter().enumerate() {
        match p {
            Ok(img) => {
                keep.push(i);
                images.push(img);
            }
            Err(e) => failures.push(ItemError {
                item: manifest.records[i].image_path.clone(),
                error: e.to_string(),
            }),
        }
    }
    if images.is_empty() {
        return Err(Error::Data("no image could be prepared".into()));
    }
    let subset = manifest.select(&keep);
    let z = zero_shot_classify(&ck.model, &images, &ck.prompts)?;
    let report = EvaluationReport::from_scores(&manifest.source.dataset, &z.scores, &labels(&subset))?;
    report.write(&run.join("report.json"), &run.join("confusion.csv"))?;
    write_atomic(
        &run.join("predictions.csv"),
        predictions_csv(&subset, &z.scores, &z.labels).as_bytes(),
    )?;
    let summary = json!({
        "samples": report.samples,
        "accuracy": report.summary.overall_accuracy,
        "per_class_auc": report.per_class_auc,
        "adjacent_error_fraction": report.summary.adjacent_error_fraction,
        "report": "report.json",
        "predictions": "predictions.csv",
        "failures": failures,
    });
    let outcome = partial_failure(&failures, manifest.len());
    Ok((summary, String::new(), outcome))
}

#[allow(clippy::too_many_arguments)]
fn gradcam(
    s: &Settings,
    run: &mut RunDir,
    checkpoint: &Path,
    manifest_path: &Path,
    class: Option<String>,
    limit: Option<usize>,
    target: Option<Target>,
    alpha: Option<f64>,
) -> Result<Dispatched> {
    let alpha = alpha.unwrap_or(s.gradcam_alpha);
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let score = match target {
        Some(Target::Similarity) => SaliencyTarget::Similarity,
        Some(Target::Probability) => SaliencyTarget::Probability,
        None => s.gradcam_target,
    };
    let class: Option<Density> = class.map(|c| c.parse()).transpose().map_err(|e: Error| Error::Config(e.to_string()))?;
    let mut manifest = Manifest::load(manifest_path)?;
    if let Some(n) = limit {
        manifest.records.truncate(n);
    }
    let base = base_dir(manifest_path);
    run.record_input("checkpoint", checkpoint)?;
    run.record_input("manifest", manifest_path)?;
    let ck = Checkpoint::load(checkpoint)?;

    let results: Vec<Result<serde_json::Value>> = manifest
        .records
        .par_iter()
        .map(|r| {
            let image = read_png(&base.join(&r.image_path))?;
            let target = class.unwrap_or(r.density);
            let map = saliency::gradcam(&ck.model, &image, target, &ck.prompts, score)?;
            let stem = Path::new(&r.image_path).with_extension("");
            let overlay = run.join("overlays").join(stem.with_extension("png"));
            let grid = run.join("grids").join(stem.with_extension("salgrid"));
            write_atomic(&overlay, &saliency::overlay(&image, &map.grid, alpha)?)?;
            saliency::write_grid(&grid, &map.raw)?;
            Ok(json!({
                "image_path": r.image_path,
                "target": target,
                "centroid": map.centroid(),
            }))
        })
        .collect();
    let (mut items, mut failures) = (Vec::new(), Vec::new());
    for (r, res) in manifest.records.iter().zip(results) {
        match res {
            Ok(v) => items.push(v),
            Err(e) => failures.push(ItemError {
                item: r.image_path.clone(),
                error: e.to_string(),
            }),
        }
    }
    let mut config = KvFile::new();
    config.push("gradcam.alpha", alpha)?;
    config.push(
        "gradcam.target",
        match score {
            SaliencyTarget::Similarity => "similarity",
            SaliencyTarget::Probability => "probability",
        },
    )?;
    let summary = json!({
        "maps": items,
        "overlays": "overlays",
        "grids": "grids",
        "failures": failures,
    });
    let outcome = partial_failure(&failures, manifest.len());
    Ok((summary, config.to_string(), outcome))
}
