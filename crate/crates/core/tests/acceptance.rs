//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! `cargo test --test acceptance -- 2 5` runs a subset. Criteria 8-10 and
//! the supplementary checks 11-13 reuse the desk-scale models from
//! criterion 6; without it only fold 0 is trained. `MAMMOCLIP_WRITE_FIXTURES=1` rewrites the fixture digests
//! and the golden overlay instead of checking them.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use mammoclip::autodiff::gradcheck::{check, op_catalog};
use mammoclip::autodiff::Array;
use mammoclip::checkpoint::Checkpoint;
use mammoclip::curation::{stratified_group_kfold, FoldAssignment, STRATIFICATION_TOLERANCE};
use mammoclip::density::{ClassPromptSet, Density};
use mammoclip::evaluation::{argmax, auc_one_vs_rest, zero_shot_classify, EvaluationReport};
use mammoclip::grid::{Grid, Mask};
use mammoclip::image_io::quantize_u16;
use mammoclip::kv::KvFile;
use mammoclip::manifest::Manifest;
use mammoclip::model::{DualEncoderConfig, DualEncoderModel};
use mammoclip::objective::{loss_value, ClassWeights};
use mammoclip::phantom::{generate_phantom, ArtifactFlags, DatasetSpec, Phantom, PhantomSpec, Quadrant};
use mammoclip::pipeline::prepare_image;
use mammoclip::preprocess::preprocess;
use mammoclip::saliency::{gradcam, overlay, SaliencyTarget, DEFAULT_ALPHA};
use mammoclip::training::{cross_validate, train_fold, Dataset, FoldOutcome, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

const GRADCHECK_STEP: f64 = 1e-5;
const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_SEEDS: u64 = 20;
const GRADCHECK_SECONDS: f64 = 60.0;
const LOSS_TOLERANCE: f64 = 1e-12;
const HAND_TOLERANCE: f64 = 1e-6;
const WEIGHT_TOLERANCE: f64 = 1e-6;
const WEIGHT_MEAN_TOLERANCE: f64 = 1e-9;
const SPLIT_MANIFESTS: u64 = 100;
const AUC_INSTANCES: u64 = 1000;
const AUC_TOLERANCE: f64 = 1e-9;
const DESK_ACCURACY: f64 = 0.90;
const DESK_AUC: f64 = 0.95;
/// Budget on the 4-core reference machine; scaled linearly on fewer cores.
const DESK_SECONDS: f64 = 15.0 * 60.0;
const DESK_REFERENCE_CORES: usize = 4;
const ADJACENT_FRACTION: f64 = 0.80;
const SALIENCY_PHANTOMS: usize = 50;
const SALIENCY_MASS: f64 = 0.60;
const CENTROID_PAIRS: u64 = 20;
const ARTIFACT_MASS: f64 = 0.20;
const SHIFTED_AUC: f64 = 0.85;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn read_kv(name: &str) -> KvFile {
    KvFile::parse(&std::fs::read_to_string(fixture(name)).unwrap()).unwrap()
}

fn writing_fixtures() -> bool {
    std::env::var_os("MAMMOCLIP_WRITE_FIXTURES").is_some()
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

struct Suite {
    selected: BTreeSet<u32>,
    failures: Vec<u32>,
}

impl Suite {
    fn wants(&self, n: u32) -> bool {
        self.selected.is_empty() || self.selected.contains(&n)
    }

    fn run(&mut self, n: u32, name: &str, f: impl FnOnce() -> Verdict) {
        if !self.wants(n) {
            return;
        }
        let started = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        if !v.pass {
            self.failures.push(n);
        }
        println!(
            "{} {n:>2} {name}: {} [{:.1} s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            started.elapsed().as_secs_f64()
        );
    }
}

fn autodiff_gradients() -> Verdict {
    let started = Instant::now();
    let mut worst: (f64, &str) = (0.0, "");
    let mut bad = Vec::new();
    let catalog = op_catalog();
    for (name, make) in &catalog {
        for seed in 0..GRADCHECK_SEEDS {
            match check(&make(seed), GRADCHECK_STEP) {
                Ok(r) if r.checked > 0 => {
                    if r.max_relative_error > worst.0 {
                        worst = (r.max_relative_error, name);
                    }
                    if r.max_relative_error >= GRADCHECK_TOLERANCE {
                        bad.push(format!("{name}#{seed}"));
                    }
                }
                Ok(_) => bad.push(format!("{name}#{seed} checked nothing")),
                Err(e) => bad.push(format!("{name}#{seed}: {e}")),
            }
        }
    }
    let seconds = started.elapsed().as_secs_f64();
    verdict(
        bad.is_empty() && seconds < GRADCHECK_SECONDS,
        format!(
            "{} ops x {GRADCHECK_SEEDS} seeds, worst relative error {:.2e} ({}), {seconds:.1} s, failures {bad:?}",
            catalog.len(),
            worst.0,
            worst.1
        ),
    )
}

/// Plain mean cross-entropy, computed directly from the logits.
fn cross_entropy_oracle(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    rows.iter()
        .zip(labels)
        .map(|(r, &l)| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - r[l]
        })
        .sum::<f64>()
        / rows.len() as f64
}

fn to_array(rows: &[Vec<f64>]) -> Array {
    Array::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

fn loss_contract() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut uniform_err, mut rescale_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..500 {
        let n = rng.gen_range(1..12);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.gen_range(-8.0..8.0)).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let sims = to_array(&rows);
        let uniform = loss_value(&sims, &labels, &ClassWeights::uniform(4)).unwrap();
        uniform_err = uniform_err.max((uniform - cross_entropy_oracle(&rows, &labels)).abs());

        let w: Vec<f64> = (0..4).map(|_| rng.gen_range(0.05..5.0)).collect();
        let c = rng.gen_range(0.01..100.0);
        let base = loss_value(&sims, &labels, &ClassWeights::new(w.clone()).unwrap()).unwrap();
        let scaled = loss_value(&sims, &labels, &ClassWeights::new(w.iter().map(|x| x * c).collect()).unwrap()).unwrap();
        rescale_err = rescale_err.max((base - scaled).abs());
    }
    let single = loss_value(&to_array(&[vec![1.0, 0.0]]), &[0], &ClassWeights::new(vec![2.0, 1.0]).unwrap()).unwrap();
    let flat = loss_value(&to_array(&[vec![0.0; 4]]), &[2], &ClassWeights::uniform(4)).unwrap();
    let single_err = (single - 0.313262).abs();
    let flat_err = (flat - 4f64.ln()).abs();
    verdict(
        uniform_err <= LOSS_TOLERANCE
            && rescale_err <= LOSS_TOLERANCE
            && single_err <= HAND_TOLERANCE
            && flat_err <= HAND_TOLERANCE,
        format!(
            "uniform vs plain CE {uniform_err:.1e}, rescaling {rescale_err:.1e}, \
             single-sample {single:.6} (err {single_err:.1e}), uniform row {flat:.6} (err {flat_err:.1e})"
        ),
    )
}

fn class_weight_values() -> Verdict {
    let counts = [4000, 6000, 6000, 3000];
    let w = ClassWeights::from_counts(&counts).unwrap();
    let expected = [1.1875, 0.791667, 0.791667, 1.583333];
    let err = w
        .as_slice()
        .iter()
        .zip(expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let mean = w.sample_mean(&counts);
    verdict(
        err <= WEIGHT_TOLERANCE && (mean - 1.0).abs() <= WEIGHT_MEAN_TOLERANCE,
        format!("weights {:?}, max error {err:.1e}, sample mean {mean:.12}", w.as_slice()),
    )
}

fn splitter_safety() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut dirty = Vec::new();
    for seed in 0..SPLIT_MANIFESTS {
        let patients = 150 + (seed as usize * 37) % 351;
        let m = common::random_manifest(seed, patients);
        let folds = match stratified_group_kfold(&m, 5, seed) {
            Ok(f) => f,
            Err(e) => {
                dirty.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        let rc = common::recount(&m, &folds);
        if !rc.clean() {
            dirty.push(format!("seed {seed}: {rc:?}"));
        }
        worst = worst.max(rc.max_relative_deviation);
    }
    verdict(
        dirty.is_empty() && worst <= STRATIFICATION_TOLERANCE,
        format!(
            "{SPLIT_MANIFESTS} manifests of 150-500 patients, violations {}, worst class-share deviation {:.1}%",
            dirty.len(),
            worst * 100.0
        ),
    )
}

fn brute_force_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &p) in positive.iter().enumerate() {
        if !p {
            continue;
        }
        for (j, &q) in positive.iter().enumerate() {
            if q {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn auc_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut with_ties = 0;
    for _ in 0..AUC_INSTANCES {
        let n = rng.gen_range(2..80);
        let levels = rng.gen_range(2..12);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let mut positive: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        positive[0] = true;
        positive[1] = false;
        let distinct: BTreeSet<u64> = scores.iter().map(|s| s.to_bits()).collect();
        with_ties += (distinct.len() < n) as usize;
        let fast = auc_one_vs_rest(&scores, &positive).unwrap();
        worst = worst.max((fast - brute_force_auc(&scores, &positive)).abs());
    }
    verdict(
        worst <= AUC_TOLERANCE,
        format!("{AUC_INSTANCES} instances ({with_ties} with ties), max difference {worst:.1e}"),
    )
}

/// Manifest text plus the 16-bit samples of every image.
fn dataset_digest(phantoms: &[Phantom], manifest: &Manifest) -> String {
    let mut h = Sha256::new();
    h.update(manifest.to_jsonl().as_bytes());
    for p in phantoms {
        for v in quantize_u16(&p.image).data() {
            h.update(((v * 65535.0).round() as u16).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

struct Prepared {
    manifest: Manifest,
    images: Vec<Grid>,
    labels: Vec<usize>,
    digest_ok: bool,
}

fn prepare_fixture(name: &str) -> Prepared {
    let spec = DatasetSpec::from_kv(&read_kv(&format!("{name}.kv"))).unwrap();
    let (phantoms, manifest) = spec.generate().unwrap();
    let digest = dataset_digest(&phantoms, &manifest);
    let digest_ok = if writing_fixtures() {
        update_digest(name, &digest);
        true
    } else {
        read_kv("digests.kv").get(name) == Some(digest.as_str())
    };
    let images = phantoms.par_iter().map(|p| prepare_image(&p.image).unwrap()).collect();
    let labels = manifest.records.iter().map(|r| r.density.index()).collect();
    Prepared {
        manifest,
        images,
        labels,
        digest_ok,
    }
}

fn update_digest(name: &str, digest: &str) {
    let path = fixture("digests.kv");
    let old = std::fs::read_to_string(&path).map(|t| KvFile::parse(&t).unwrap()).unwrap_or_default();
    let mut kv = KvFile::new();
    for (k, v) in old.entries().filter(|(k, _)| *k != name) {
        kv.push(k, v).unwrap();
    }
    kv.push(name, digest).unwrap();
    std::fs::write(path, kv.to_string()).unwrap();
}

fn train_config() -> TrainConfig {
    TrainConfig::from_kv(&read_kv("train.kv")).unwrap()
}

fn initial_model(prompts: &ClassPromptSet, config: &TrainConfig) -> DualEncoderModel {
    DualEncoderModel::new(DualEncoderConfig::for_prompts(prompts), config.seed).unwrap()
}

/// Desk-scale fixture, its split and the trained fold models.
struct Desk {
    data: Prepared,
    folds: FoldAssignment,
    prompts: ClassPromptSet,
    config: TrainConfig,
    outcomes: Vec<FoldOutcome>,
    reports: Vec<EvaluationReport>,
    seconds: f64,
}

impl Desk {
    fn build(all_folds: bool) -> Desk {
        let started = Instant::now();
        let config = train_config();
        let prompts = ClassPromptSet::default();
        let data = prepare_fixture("desk");
        let folds = stratified_group_kfold(&data.manifest, 5, config.seed).unwrap();
        let init = initial_model(&prompts, &config);
        let dataset = Dataset::new(&data.images, &data.labels).unwrap();
        let (outcomes, reports) = if all_folds {
            let cv = cross_validate(&data.manifest, dataset, &folds, &init, &prompts, &config, None).unwrap();
            (cv.outcomes, cv.aggregate.folds.into_iter().map(|f| f.report).collect())
        } else {
            let (outcome, report) = train_one(&data, &folds, 0, &init, &prompts, &config);
            (vec![outcome], vec![report])
        };
        Desk {
            data,
            folds,
            prompts,
            config,
            outcomes,
            reports,
            seconds: started.elapsed().as_secs_f64(),
        }
    }

    fn model(&self) -> &DualEncoderModel {
        &self.outcomes[0].best
    }

    fn validation(&self, f: usize) -> (Vec<Grid>, Vec<usize>) {
        let (_, val) = self.folds.indices(&self.data.manifest, f).unwrap();
        (
            val.iter().map(|&i| self.data.images[i].clone()).collect(),
            val.iter().map(|&i| self.data.labels[i]).collect(),
        )
    }
}

fn train_one(
    data: &Prepared,
    folds: &FoldAssignment,
    f: usize,
    init: &DualEncoderModel,
    prompts: &ClassPromptSet,
    config: &TrainConfig,
) -> (FoldOutcome, EvaluationReport) {
    let (train, val) = folds.indices(&data.manifest, f).unwrap();
    let weights = ClassWeights::from_manifest(&data.manifest.select(&train)).unwrap();
    let dataset = Dataset::new(&data.images, &data.labels).unwrap();
    let outcome = train_fold(init, dataset, &train, &val, prompts, &weights, config, None).unwrap();
    let images: Vec<Grid> = val.iter().map(|&i| data.images[i].clone()).collect();
    let labels: Vec<usize> = val.iter().map(|&i| data.labels[i]).collect();
    let report = EvaluationReport::evaluate(&outcome.best, &images, &labels, prompts, &format!("fold{f}")).unwrap();
    (outcome, report)
}

fn desk_scale(desk: &Desk) -> Verdict {
    let accs: Vec<f64> = desk.reports.iter().map(|r| r.summary.overall_accuracy).collect();
    let mean_acc = accs.iter().sum::<f64>() / accs.len() as f64;
    let class_auc: Vec<f64> = (0..Density::COUNT)
        .map(|c| desk.reports.iter().map(|r| r.per_class_auc[c].unwrap_or(f64::NAN)).sum::<f64>() / desk.reports.len() as f64)
        .collect();
    let min_auc = class_auc.iter().cloned().fold(f64::INFINITY, f64::min);

    // Rerun fold 0 (every fold with MAMMOCLIP_ACCEPTANCE_FULL_RERUN) from
    // scratch and compare every logged number and the selected weights.
    let rerun_folds = if std::env::var_os("MAMMOCLIP_ACCEPTANCE_FULL_RERUN").is_some() {
        desk.outcomes.len()
    } else {
        1
    };
    let init = initial_model(&desk.prompts, &desk.config);
    let mut reproducible = true;
    for f in 0..rerun_folds {
        let (again, report) = train_one(&desk.data, &desk.folds, f, &init, &desk.prompts, &desk.config);
        reproducible &= again.log.reproducible_part() == desk.outcomes[f].log.reproducible_part()
            && again.best == desk.outcomes[f].best
            && report.to_json() == desk.reports[f].to_json();
    }
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let budget = DESK_SECONDS * DESK_REFERENCE_CORES as f64 / cores.min(DESK_REFERENCE_CORES) as f64;
    verdict(
        desk.outcomes.len() == 5
            && desk.data.digest_ok
            && mean_acc >= DESK_ACCURACY
            && min_auc >= DESK_AUC
            && desk.seconds <= budget
            && reproducible,
        format!(
            "fixture digest {}, fold accuracies {:.3?}, mean {mean_acc:.3}, mean per-class AUC {:.4?}, \
             wall time {:.0} s on {cores} core(s) (budget {budget:.0} s), rerun of {rerun_folds} fold(s) bit-exact: {reproducible}",
            if desk.data.digest_ok { "ok" } else { "MISMATCH" },
            accs,
            class_auc,
            desk.seconds
        ),
    )
}

fn adjacent_errors() -> Verdict {
    let config = train_config();
    let prompts = ClassPromptSet::default();
    let data = prepare_fixture("overlap");
    let folds = stratified_group_kfold(&data.manifest, 5, config.seed).unwrap();
    let init = initial_model(&prompts, &config);
    let (_, report) = train_one(&data, &folds, 0, &init, &prompts, &config);
    let s = &report.summary;
    let errors: usize = (0..4).flat_map(|t| (0..4).map(move |p| (t, p))).filter(|(t, p)| t != p).map(|(t, p)| s.confusion[t][p]).sum();
    let fraction = s.adjacent_error_fraction;
    verdict(
        data.digest_ok && fraction.is_some_and(|f| f >= ADJACENT_FRACTION),
        format!(
            "overlapping-range fixture digest {}, fold-0 validation accuracy {:.3}, {errors} errors, adjacent share {}",
            if data.digest_ok { "ok" } else { "MISMATCH" },
            s.overall_accuracy,
            fraction.map_or("n/a".into(), |f| format!("{f:.3}"))
        ),
    )
}

/// Input-resolution image and a generator mask carried through the same
/// preprocessing.
fn prepared_with_mask(p: &Phantom, mask: &Mask) -> (Grid, Mask) {
    let pre = preprocess(&quantize_u16(&p.image)).unwrap();
    (quantize_u16(&pre.image), pre.transform_mask(mask).unwrap())
}

const QUADRANTS: [Quadrant; 4] = [Quadrant::TopLeft, Quadrant::TopRight, Quadrant::BottomLeft, Quadrant::BottomRight];

/// Class-B phantoms whose dense tissue fits in the given quadrant.
fn quadrant_phantom(seed: u64, q: Quadrant) -> Option<Phantom> {
    let mut spec = PhantomSpec::new(Density::B, seed);
    spec.fraction = Some(0.16);
    spec.quadrant = Some(q);
    generate_phantom(&spec).ok()
}

fn saliency_localization(desk: &Desk) -> Verdict {
    let model = desk.model();
    let prompts = &desk.prompts;
    // Dense-tissue evidence is read from the densest-category prompt.
    let target = Density::D;
    let score = SaliencyTarget::Similarity;

    let phantoms: Vec<Phantom> = (0u64..)
        .filter_map(|s| quadrant_phantom(100_000 + s, QUADRANTS[s as usize % 4]))
        .take(SALIENCY_PHANTOMS)
        .collect();
    let masses: Vec<(f64, f64)> = phantoms
        .par_iter()
        .map(|p| {
            let (img, mask) = prepared_with_mask(p, &p.dense_mask);
            let dense = gradcam(model, &img, target, prompts, score).unwrap().mass_fraction(&mask);
            let own = gradcam(model, &img, p.record.density, prompts, score).unwrap().mass_fraction(&mask);
            (dense, own)
        })
        .collect();
    let mean_mass = masses.iter().map(|m| m.0).sum::<f64>() / masses.len() as f64;
    let own_mass = masses.iter().map(|m| m.1).sum::<f64>() / masses.len() as f64;

    let tracked = (0..CENTROID_PAIRS)
        .into_par_iter()
        .filter(|&s| {
            let vertical = s % 2 == 0;
            let to = if vertical { Quadrant::BottomLeft } else { Quadrant::TopRight };
            let c: Vec<(f64, f64)> = [Quadrant::TopLeft, to]
                .iter()
                .map(|&q| {
                    let p = quadrant_phantom(200_000 + s, q).expect("quadrant fits");
                    let img = prepare_image(&p.image).unwrap();
                    gradcam(model, &img, target, prompts, score).unwrap().centroid().unwrap_or((f64::NAN, f64::NAN))
                })
                .collect();
            if vertical {
                c[1].0 > c[0].0
            } else {
                c[1].1 > c[0].1
            }
        })
        .count();

    let kinds = [
        ("paddle", ArtifactFlags { paddle_mark: true, ..Default::default() }),
        ("implant", ArtifactFlags { implant: true, ..Default::default() }),
        ("text", ArtifactFlags { burned_in_text: true, ..Default::default() }),
        ("clip", ArtifactFlags { clip: true, ..Default::default() }),
    ];
    let artifact: Vec<(&str, f64, f64)> = kinds
        .iter()
        .map(|(name, flags)| {
            let m: Vec<(f64, f64)> = (0..12u64)
                .into_par_iter()
                .map(|s| {
                    let mut spec = PhantomSpec::new(Density::ALL[s as usize % 4], 300_000 + s);
                    spec.artifacts = *flags;
                    let p = generate_phantom(&spec).unwrap();
                    let (img, mask) = prepared_with_mask(&p, &p.artifact_mask);
                    let dense = gradcam(model, &img, target, prompts, score).unwrap().mass_fraction(&mask);
                    let own = gradcam(model, &img, p.record.density, prompts, score).unwrap().mass_fraction(&mask);
                    (dense, own)
                })
                .collect();
            let n = m.len() as f64;
            (*name, m.iter().map(|v| v.0).sum::<f64>() / n + 0.0, m.iter().map(|v| v.1).sum::<f64>() / n + 0.0)
        })
        .collect();
    let worst_artifact = artifact.iter().map(|a| a.1).fold(0.0, f64::max);
    let worst_own_artifact = artifact.iter().map(|a| a.2).fold(0.0, f64::max);

    verdict(
        mean_mass >= SALIENCY_MASS && tracked as u64 == CENTROID_PAIRS && worst_artifact < ARTIFACT_MASS,
        format!(
            "dense-mask mass {mean_mass:.3} over {} quadrant phantoms (own-class prompt {own_mass:.3}), \
             centroid tracked {tracked}/{CENTROID_PAIRS}, artifact mass {} (own-class prompt worst {worst_own_artifact:.3})",
            masses.len(),
            artifact.iter().map(|(n, m, _)| format!("{n} {m:.3}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn golden_overlay(desk: &Desk) -> Verdict {
    let (model, prompts) = (desk.model(), &desk.prompts);
    let p = quadrant_phantom(400_000, Quadrant::TopLeft).expect("quadrant fits");
    let img = prepare_image(&p.image).unwrap();
    let map = gradcam(model, &img, Density::D, prompts, SaliencyTarget::Similarity).unwrap();
    let png = overlay(&img, &map.grid, DEFAULT_ALPHA).unwrap();
    let path = fixture("golden_overlay.png");
    if writing_fixtures() {
        std::fs::write(&path, &png).unwrap();
        return verdict(true, "golden overlay written");
    }
    match std::fs::read(&path) {
        Ok(bytes) if bytes == png => verdict(true, format!("overlay of {} bytes matches the committed file", png.len())),
        Ok(_) => verdict(false, "overlay differs from the committed file"),
        Err(e) => verdict(false, format!("golden overlay missing ({e})")),
    }
}

fn prompt_separation(desk: &Desk) -> Verdict {
    let t = desk.model().encode_prompts(&desk.prompts.tokenized()).unwrap();
    let (k, d) = (t.shape()[0], t.shape()[1]);
    let row = |i: usize| &t.data()[i * d..(i + 1) * d];
    let mut worst = f64::NEG_INFINITY;
    for i in 0..k {
        for j in i + 1..k {
            let dot: f64 = row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum();
            let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max(dot / (norm(row(i)) * norm(row(j))));
        }
    }
    verdict(worst < 1.0 - 1e-6, format!("largest pairwise prompt cosine {worst:.4}"))
}

fn argmax_invariance(desk: &Desk) -> Verdict {
    let (images, _) = desk.validation(0);
    let img = desk.model().encode_images(&images).unwrap();
    let txt = desk.model().encode_prompts(&desk.prompts.tokenized()).unwrap();
    let d = txt.shape()[1];
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ranked: Vec<usize> = img
        .data()
        .chunks(d)
        .map(|x| {
            let cos: Vec<f64> = txt.data().chunks(d).map(|t| x.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / (norm(x) * norm(t))).collect();
            argmax(&cos)
        })
        .collect();
    let labels = zero_shot_classify(desk.model(), &images, &desk.prompts).unwrap().labels;
    let agree = ranked.iter().zip(&labels).filter(|(a, b)| a == b).count();
    verdict(agree == labels.len(), format!("{agree}/{} fold-0 validation labels match raw cosine ranking", labels.len()))
}

fn zero_shot_transfer(desk: &Desk) -> Verdict {
    let shifted = prepare_fixture("shifted");
    let evaluate = |m: &DualEncoderModel| {
        EvaluationReport::evaluate(m, &shifted.images, &shifted.labels, &desk.prompts, "shifted").unwrap()
    };
    let report = evaluate(desk.model());
    let aucs: Vec<f64> = report.per_class_auc.iter().map(|a| a.unwrap_or(f64::NAN)).collect();
    let min = report.min_auc().unwrap_or(f64::NAN);
    let others: Vec<f64> = desk.outcomes[1..]
        .iter()
        .map(|o| evaluate(&o.best).min_auc().unwrap_or(f64::NAN))
        .collect();
    verdict(
        shifted.digest_ok && min >= SHIFTED_AUC,
        format!(
            "shifted fixture digest {}, {} images, fold-0 model per-class AUC {:.3?}, accuracy {:.3}; \
             other folds' worst AUC {:.3?}",
            if shifted.digest_ok { "ok" } else { "MISMATCH" },
            shifted.labels.len(),
            aucs,
            report.summary.overall_accuracy,
            others
        ),
    )
}

fn checkpoint_fidelity(desk: &Desk) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fold0.ckpt");
    Checkpoint::new(desk.model().clone(), desk.prompts.clone()).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let (images, labels) = desk.validation(0);
    let report = EvaluationReport::evaluate(&loaded.model, &images, &labels, &loaded.prompts, "fold0").unwrap();
    let same = report == desk.reports[0] && report.to_json() == desk.reports[0].to_json();
    verdict(
        same && loaded.model == *desk.model(),
        format!(
            "reloaded fold-0 model: parameters identical {}, validation report identical {same} (accuracy {:.4})",
            loaded.model == *desk.model(),
            report.summary.overall_accuracy
        ),
    )
}

fn main() {
    let selected: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut suite = Suite {
        selected,
        failures: Vec::new(),
    };
    let started = Instant::now();
    suite.run(1, "autodiff gradient checks", autodiff_gradients);
    suite.run(2, "loss contract", loss_contract);
    suite.run(3, "class weights", class_weight_values);
    suite.run(4, "splitter safety", splitter_safety);
    suite.run(5, "AUC oracle equivalence", auc_oracle);

    let needs_desk = [6, 8, 9, 10, 11, 12, 13].iter().any(|&n| suite.wants(n));
    let desk = needs_desk.then(|| {
        let all = suite.wants(6);
        catch_unwind(AssertUnwindSafe(|| Desk::build(all))).ok()
    });
    let desk = desk.flatten();
    let missing = || verdict(false, "desk-scale training failed");
    suite.run(6, "desk-scale cross-validation", || desk.as_ref().map_or_else(missing, desk_scale));
    suite.run(7, "adjacent-error structure", adjacent_errors);
    suite.run(8, "GradCAM localization", || desk.as_ref().map_or_else(missing, saliency_localization));
    suite.run(9, "zero-shot transfer", || desk.as_ref().map_or_else(missing, zero_shot_transfer));
    suite.run(10, "checkpoint fidelity", || desk.as_ref().map_or_else(missing, checkpoint_fidelity));
    suite.run(11, "prompt separation (supplementary)", || desk.as_ref().map_or_else(missing, prompt_separation));
    suite.run(12, "zero-shot argmax invariance (supplementary)", || desk.as_ref().map_or_else(missing, argmax_invariance));
    suite.run(13, "golden overlay (supplementary)", || desk.as_ref().map_or_else(missing, golden_overlay));

    println!("acceptance finished in {:.0} s", started.elapsed().as_secs_f64());
    if !suite.failures.is_empty() {
        println!("failed criteria: {:?}", suite.failures);
        std::process::exit(1);
    }
}
