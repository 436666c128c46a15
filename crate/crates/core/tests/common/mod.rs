//! Helpers shared by the integration tests and the acceptance suite.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use mammoclip::curation::FoldAssignment;
use mammoclip::density::{Density, Modality};
use mammoclip::manifest::{ImageRecord, Manifest, ManifestSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random manifest with `patients` patients, skewed class frequencies, one
/// or two views per study and some patients with a second study.
pub fn random_manifest(seed: u64, patients: usize) -> Manifest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut freq: Vec<f64> = (0..4).map(|_| rng.gen_range(0.35..1.0)).collect();
    let total: f64 = freq.iter().sum();
    freq.iter_mut().for_each(|f| *f /= total);
    let longitudinal_rate = rng.gen_range(0.0..0.25);
    let mut records = Vec::new();
    for p in 0..patients {
        let mut u = rng.gen::<f64>();
        let class = freq
            .iter()
            .position(|&f| {
                u -= f;
                u < 0.0
            })
            .unwrap_or(3);
        let studies = if rng.gen_bool(longitudinal_rate) { 2 } else { 1 };
        for s in 0..studies {
            let density = if s > 0 && rng.gen_bool(0.3) {
                Density::ALL[(class + 1).min(3)]
            } else {
                Density::ALL[class]
            };
            let views = rng.gen_range(1..=2);
            for v in 0..views {
                records.push(ImageRecord {
                    patient_id: format!("R{p:04}"),
                    study_id: format!("R{p:04}-S{s}"),
                    image_path: format!("img/R{p:04}-S{s}-{v}.png"),
                    modality: Modality::ALL[rng.gen_range(0..3)],
                    density,
                    site: "site-1".into(),
                    acquired_at: format!("201{}-0{}-1{}", 5 + s, 1 + v, p % 10),
                });
            }
        }
    }
    Manifest::new(ManifestSource { dataset: format!("random-{seed}"), seed: Some(seed) }, records).unwrap()
}

/// Independent recount of a fold assignment: everything is derived from
/// raw records and patient lists, without the splitter's own audit.
#[derive(Debug)]
pub struct Recount {
    pub leaked_patients: usize,
    pub longitudinal_in_validation: usize,
    pub longitudinal_missing_from_training: usize,
    pub singles_not_validated_once: usize,
    pub max_relative_deviation: f64,
}

impl Recount {
    pub fn clean(&self) -> bool {
        self.leaked_patients == 0
            && self.longitudinal_in_validation == 0
            && self.longitudinal_missing_from_training == 0
            && self.singles_not_validated_once == 0
    }
}

pub fn recount(manifest: &Manifest, folds: &FoldAssignment) -> Recount {
    let mut studies: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in &manifest.records {
        studies.entry(&r.patient_id).or_default().insert(&r.study_id);
    }
    let longitudinal: BTreeSet<&str> = studies.iter().filter(|(_, s)| s.len() > 1).map(|(p, _)| *p).collect();

    let mut single_counts = [0usize; 4];
    for r in &manifest.records {
        if !longitudinal.contains(r.patient_id.as_str()) {
            single_counts[r.density.index()] += 1;
        }
    }
    let single_total: usize = single_counts.iter().sum();

    let mut rc = Recount {
        leaked_patients: 0,
        longitudinal_in_validation: 0,
        longitudinal_missing_from_training: 0,
        singles_not_validated_once: 0,
        max_relative_deviation: 0.0,
    };
    let mut times_validated: BTreeMap<&str, usize> = BTreeMap::new();
    for fold in &folds.folds {
        let train: BTreeSet<&str> = fold.train_patients.iter().map(String::as_str).collect();
        let val: BTreeSet<&str> = fold.val_patients.iter().map(String::as_str).collect();
        rc.leaked_patients += train.intersection(&val).count();
        for p in &val {
            *times_validated.entry(p).or_default() += 1;
            if longitudinal.contains(p) {
                rc.longitudinal_in_validation += 1;
            }
        }
        rc.longitudinal_missing_from_training += longitudinal.iter().filter(|p| !train.contains(*p)).count();

        let mut hist = [0usize; 4];
        for r in &manifest.records {
            if val.contains(r.patient_id.as_str()) {
                hist[r.density.index()] += 1;
            }
        }
        let n: usize = hist.iter().sum();
        for c in 0..4 {
            if single_counts[c] == 0 || n == 0 {
                continue;
            }
            let expected = single_counts[c] as f64 / single_total as f64;
            let got = hist[c] as f64 / n as f64;
            rc.max_relative_deviation = rc.max_relative_deviation.max((got - expected).abs() / expected);
        }
    }
    rc.singles_not_validated_once = studies
        .keys()
        .filter(|p| !longitudinal.contains(*p))
        .filter(|p| times_validated.get(*p).copied().unwrap_or(0) != 1)
        .count();
    rc
}
