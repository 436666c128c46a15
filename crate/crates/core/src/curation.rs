//! Undersampling, class weighting and patient-grouped stratified folds.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::Density;
use crate::manifest::Manifest;
use crate::objective::ClassWeights;
use crate::util::{read, write_atomic};
use crate::{Error, Result};

/// Relative tolerance on per-fold validation class proportions.
pub const STRATIFICATION_TOLERANCE: f64 = 0.20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shortfall {
    /// Keep every image of a class with fewer than the target.
    #[default]
    TakeAll,
    /// Refuse targets above availability.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UndersamplePlan {
    pub targets: [usize; Density::COUNT],
    pub seed: u64,
    pub shortfall: Shortfall,
}

/// Draw `min(target, available)` images per class. Patients are drawn whole
/// in seeded order while they fit; the remainder is filled with single
/// images from the next patient drawn. Output keeps manifest order.
pub fn undersample(manifest: &Manifest, plan: &UndersamplePlan) -> Result<Manifest> {
    if plan.targets.contains(&0) {
        return Err(Error::Config("undersampling targets must be positive".into()));
    }
    let available = manifest.class_counts();
    let mut keep = Vec::new();
    for class in Density::ALL {
        let c = class.index();
        if plan.shortfall == Shortfall::Strict && plan.targets[c] > available[c] {
            return Err(Error::Data(format!(
                "class {class} has {} images, fewer than the target {}",
                available[c], plan.targets[c]
            )));
        }
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in manifest.records.iter().enumerate() {
            if r.density == class {
                groups.entry(&r.patient_id).or_default().push(i);
            }
        }
        let mut groups: Vec<Vec<usize>> = groups
            .into_values()
            .map(|mut g| {
                g.sort_by(|&a, &b| manifest.records[a].image_path.cmp(&manifest.records[b].image_path));
                g
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::util::mix_seed(plan.seed, c as u64));
        groups.shuffle(&mut rng);
        let mut remaining = plan.targets[c].min(available[c]);
        let mut partial = Vec::new();
        for g in groups {
            if remaining == 0 {
                break;
            }
            if g.len() <= remaining {
                remaining -= g.len();
                keep.extend(g);
            } else {
                partial.push(g);
            }
        }
        for g in partial {
            let take = remaining.min(g.len());
            keep.extend_from_slice(&g[..take]);
            remaining -= take;
        }
    }
    keep.sort_unstable();
    Ok(manifest.select(&keep))
}

pub fn class_weights(manifest: &Manifest) -> Result<ClassWeights> {
    ClassWeights::from_manifest(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fold {
    pub train_patients: Vec<String>,
    pub val_patients: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Result of checking a fold assignment against its manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitAudit {
    pub folds: usize,
    pub patients: usize,
    pub longitudinal_patients: usize,
    /// Largest relative deviation of a fold's validation class share from
    /// the single-exam share of that class.
    pub max_relative_deviation: f64,
    pub within_tolerance: bool,
}

/// Majority density of a patient's images, lowest class on ties.
fn patient_class(manifest: &Manifest, indices: &[usize]) -> usize {
    let mut counts = [0usize; Density::COUNT];
    for &i in indices {
        counts[manifest.records[i].density.index()] += 1;
    }
    let best = *counts.iter().max().expect("non-empty");
    counts.iter().position(|&n| n == best).expect("present")
}

pub fn stratified_group_kfold(manifest: &Manifest, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    let patients = manifest.patients();
    let longitudinal = manifest.longitudinal_patients();
    let mut singles: Vec<(&str, usize, usize)> = patients
        .iter()
        .filter(|(p, _)| !longitudinal.contains(*p))
        .map(|(p, idx)| (*p, patient_class(manifest, idx), idx.len()))
        .collect();

    let mut present = [false; Density::COUNT];
    manifest.records.iter().for_each(|r| present[r.density.index()] = true);
    for class in Density::ALL {
        let n = singles.iter().filter(|s| s.1 == class.index()).count();
        if present[class.index()] && n < k {
            return Err(Error::Data(format!(
                "class {class} has {n} single-exam patients, need at least {k}"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    singles.shuffle(&mut rng);
    singles.sort_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)));

    let mut fill = vec![[0usize; Density::COUNT]; k];
    let mut totals = vec![0usize; k];
    let mut val: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); k];
    for (pid, class, n) in singles {
        let f = (0..k)
            .min_by_key(|&f| (fill[f][class], totals[f], f))
            .expect("k >= 2");
        fill[f][class] += n;
        totals[f] += n;
        val[f].insert(pid);
    }

    let folds = val
        .iter()
        .map(|v| Fold {
            train_patients: patients
                .keys()
                .filter(|p| !v.contains(*p))
                .map(|p| p.to_string())
                .collect(),
            val_patients: v.iter().map(|p| p.to_string()).collect(),
        })
        .collect();
    Ok(FoldAssignment { k, seed, folds })
}

impl FoldAssignment {
    /// Record indices `(train, validation)` of fold `f`, in manifest order.
    pub fn indices(&self, manifest: &Manifest, f: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let fold = self
            .folds
            .get(f)
            .ok_or_else(|| Error::Config(format!("fold {f} does not exist (k = {})", self.k)))?;
        let train: BTreeSet<&str> = fold.train_patients.iter().map(String::as_str).collect();
        let val: BTreeSet<&str> = fold.val_patients.iter().map(String::as_str).collect();
        let (mut t, mut v) = (Vec::new(), Vec::new());
        for (i, r) in manifest.records.iter().enumerate() {
            if val.contains(r.patient_id.as_str()) {
                v.push(i);
            } else if train.contains(r.patient_id.as_str()) {
                t.push(i);
            }
        }
        Ok((t, v))
    }

    /// Check leakage, longitudinal confinement, coverage and stratification.
    /// Structural violations are errors; stratification is reported.
    pub fn audit(&self, manifest: &Manifest) -> Result<SplitAudit> {
        if self.folds.len() != self.k || self.k < 2 {
            return Err(Error::Data(format!("{} folds recorded for k = {}", self.folds.len(), self.k)));
        }
        let patients = manifest.patients();
        let longitudinal = manifest.longitudinal_patients();
        let mut val_count: BTreeMap<&str, usize> = BTreeMap::new();
        for (f, fold) in self.folds.iter().enumerate() {
            let train: BTreeSet<&str> = fold.train_patients.iter().map(String::as_str).collect();
            let val: BTreeSet<&str> = fold.val_patients.iter().map(String::as_str).collect();
            if train.len() != fold.train_patients.len() || val.len() != fold.val_patients.len() {
                return Err(Error::Data(format!("fold {f} lists a patient twice")));
            }
            if let Some(p) = train.intersection(&val).next() {
                return Err(Error::Data(format!("fold {f}: patient {p} is in train and validation")));
            }
            for p in patients.keys() {
                if !train.contains(p) && !val.contains(p) {
                    return Err(Error::Data(format!("fold {f}: patient {p} is unassigned")));
                }
            }
            for p in train.iter().chain(&val) {
                if !patients.contains_key(p) {
                    return Err(Error::Data(format!("fold {f}: patient {p} is not in the manifest")));
                }
            }
            for p in &val {
                if longitudinal.contains(p) {
                    return Err(Error::Data(format!(
                        "fold {f}: longitudinal patient {p} is in validation"
                    )));
                }
                *val_count.entry(p).or_default() += 1;
            }
        }
        for p in patients.keys().filter(|p| !longitudinal.contains(*p)) {
            let n = val_count.get(p).copied().unwrap_or(0);
            if n != 1 {
                return Err(Error::Data(format!("patient {p} is in {n} validation folds")));
            }
        }

        let mut global = [0usize; Density::COUNT];
        for r in &manifest.records {
            if !longitudinal.contains(r.patient_id.as_str()) {
                global[r.density.index()] += 1;
            }
        }
        let global_total: usize = global.iter().sum();
        let mut worst: f64 = 0.0;
        for f in 0..self.k {
            let (_, v) = self.indices(manifest, f)?;
            let mut hist = [0usize; Density::COUNT];
            v.iter().for_each(|&i| hist[manifest.records[i].density.index()] += 1);
            for c in 0..Density::COUNT {
                if global[c] == 0 {
                    continue;
                }
                let expected = global[c] as f64 / global_total as f64;
                let got = if v.is_empty() { 0.0 } else { hist[c] as f64 / v.len() as f64 };
                worst = worst.max((got - expected).abs() / expected);
            }
        }
        Ok(SplitAudit {
            folds: self.k,
            patients: patients.len(),
            longitudinal_patients: longitudinal.len(),
            max_relative_deviation: worst,
            within_tolerance: worst <= STRATIFICATION_TOLERANCE,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: FoldAssignment =
            serde_json::from_str(text).map_err(|e| Error::format("fold assignment", e.to_string()))?;
        if a.k < 2 || a.folds.len() != a.k {
            return Err(Error::format(
                "fold assignment",
                format!("{} folds listed for k = {}", a.folds.len(), a.k),
            ));
        }
        Ok(a)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::format("fold assignment", format!("{}: {e}", path.display())))?;
        Self::from_json(text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::Modality;
    use crate::manifest::{ImageRecord, ManifestSource};

    fn rec(patient: &str, study: &str, view: &str, d: Density) -> ImageRecord {
        ImageRecord {
            patient_id: patient.into(),
            study_id: study.into(),
            image_path: format!("{study}-{view}.png"),
            modality: Modality::Dm,
            density: d,
            site: "site-1".into(),
            acquired_at: "2016-03-04".into(),
        }
    }

    fn counts_manifest(counts: [usize; 4]) -> Manifest {
        let mut records = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                let p = format!("P{c}-{}", i / 2);
                records.push(rec(&p, &format!("{p}-S1"), &format!("V{i}"), Density::ALL[c]));
            }
        }
        Manifest::new(ManifestSource::default(), records).unwrap()
    }

    #[test]
    fn undersample_meets_targets_and_takes_all_of_short_classes() {
        let m = counts_manifest([10, 10, 10, 5]);
        let plan = UndersamplePlan {
            targets: [4, 6, 6, 8],
            seed: 1,
            shortfall: Shortfall::TakeAll,
        };
        let out = undersample(&m, &plan).unwrap();
        assert_eq!(out.class_counts(), [4, 6, 6, 5]);
        assert_eq!(out, undersample(&m, &plan).unwrap());
        let strict = UndersamplePlan {
            shortfall: Shortfall::Strict,
            ..plan
        };
        assert!(undersample(&m, &strict).is_err());
    }

    #[test]
    fn targets_equal_to_availability_select_everything() {
        let m = counts_manifest([3, 4, 5, 6]);
        let plan = UndersamplePlan {
            targets: [3, 4, 5, 6],
            seed: 9,
            shortfall: Shortfall::Strict,
        };
        assert_eq!(undersample(&m, &plan).unwrap(), m);
    }

    #[test]
    fn longitudinal_patient_trains_in_every_fold() {
        let mut records = vec![
            rec("L", "L-S1", "CC", Density::B),
            rec("L", "L-S2", "CC", Density::B),
        ];
        for i in 0..10 {
            let p = format!("P{i}");
            records.push(rec(&p, &format!("{p}-S1"), "CC", Density::B));
        }
        let m = Manifest::new(ManifestSource::default(), records).unwrap();
        let a = stratified_group_kfold(&m, 5, 3).unwrap();
        for fold in &a.folds {
            assert!(fold.train_patients.contains(&"L".to_string()));
            assert_eq!(fold.val_patients.len(), 2);
        }
        a.audit(&m).unwrap();
    }

    #[test]
    fn too_few_patients_per_class_is_a_data_error() {
        let m = counts_manifest([20, 20, 20, 6]);
        assert!(matches!(stratified_group_kfold(&m, 5, 0), Err(Error::Data(_))));
        assert!(stratified_group_kfold(&m, 1, 0).is_err());
    }

    #[test]
    fn record_order_does_not_change_membership() {
        let m = counts_manifest([40, 30, 30, 20]);
        let mut shuffled = m.clone();
        shuffled.records.reverse();
        assert_eq!(
            stratified_group_kfold(&m, 5, 4).unwrap(),
            stratified_group_kfold(&shuffled, 5, 4).unwrap()
        );
    }

    #[test]
    fn audit_catches_leakage() {
        let m = counts_manifest([20, 20, 20, 20]);
        let mut a = stratified_group_kfold(&m, 5, 1).unwrap();
        let moved = a.folds[0].val_patients[0].clone();
        a.folds[0].train_patients.push(moved);
        assert!(a.audit(&m).is_err());
    }

    #[test]
    fn json_round_trip() {
        let m = counts_manifest([20, 20, 20, 20]);
        let a = stratified_group_kfold(&m, 4, 2).unwrap();
        assert_eq!(FoldAssignment::from_json(&a.to_json()).unwrap(), a);
        assert!(FoldAssignment::from_json(r#"{"k":3,"seed":0,"folds":[]}"#).is_err());
    }
}
