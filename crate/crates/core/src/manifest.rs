//! Image manifests: one JSON record per line.
//!
//! An optional first line of the form `{"manifest": {"dataset": ..., "seed": ...}}`
//! carries source metadata; every other line is an [`ImageRecord`].

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::density::{Density, Modality};
use crate::util::{read, write_atomic};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub patient_id: String,
    pub study_id: String,
    pub image_path: String,
    pub modality: Modality,
    pub density: Density,
    pub site: String,
    pub acquired_at: String,
}

impl ImageRecord {
    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("patient_id", &self.patient_id),
            ("study_id", &self.study_id),
            ("image_path", &self.image_path),
        ] {
            if value.trim().is_empty() {
                return Err(Error::Data(format!("{field} is empty")));
            }
        }
        if !is_iso_date(&self.acquired_at) {
            return Err(Error::Data(format!(
                "acquired_at {:?} is not an ISO-8601 date (YYYY-MM-DD)",
                self.acquired_at
            )));
        }
        Ok(())
    }
}

fn is_iso_date(s: &str) -> bool {
    let b = s.as_bytes();
    if b.len() != 10 || b[4] != b'-' || b[7] != b'-' {
        return false;
    }
    let digits = |r: std::ops::Range<usize>| -> Option<u32> {
        let part = &s[r];
        part.bytes().all(|c| c.is_ascii_digit()).then(|| part.parse().ok())?
    };
    let (Some(_), Some(m), Some(d)) = (digits(0..4), digits(5..7), digits(8..10)) else {
        return false;
    };
    (1..=12).contains(&m) && (1..=31).contains(&d)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSource {
    pub dataset: String,
    pub seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    manifest: ManifestSource,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub source: ManifestSource,
    pub records: Vec<ImageRecord>,
}

impl Manifest {
    pub fn new(source: ManifestSource, records: Vec<ImageRecord>) -> Result<Self> {
        let m = Self { source, records };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut paths = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            r.validate().map_err(|e| Error::Data(format!("record {i}: {e}")))?;
            if !paths.insert(r.image_path.as_str()) {
                return Err(Error::Data(format!("duplicate image path {:?}", r.image_path)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> [usize; Density::COUNT] {
        let mut c = [0; Density::COUNT];
        for r in &self.records {
            c[r.density.index()] += 1;
        }
        c
    }

    /// Record indices per patient, in record order.
    pub fn patients(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            map.entry(r.patient_id.as_str()).or_default().push(i);
        }
        map
    }

    /// Patients with more than one distinct study.
    pub fn longitudinal_patients(&self) -> BTreeSet<&str> {
        let mut studies: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for r in &self.records {
            studies.entry(&r.patient_id).or_default().insert(&r.study_id);
        }
        studies
            .into_iter()
            .filter(|(_, s)| s.len() > 1)
            .map(|(p, _)| p)
            .collect()
    }

    pub fn is_longitudinal(&self, patient_id: &str) -> bool {
        self.longitudinal_patients().contains(patient_id)
    }

    /// Keep the records at `indices` (in the given order).
    pub fn select(&self, indices: &[usize]) -> Manifest {
        Manifest {
            source: self.source.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        if self.source != ManifestSource::default() {
            let header = HeaderLine {
                manifest: self.source.clone(),
            };
            out.push_str(&serde_json::to_string(&header).expect("serializable"));
            out.push('\n');
        }
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("serializable"));
            out.push('\n');
        }
        out
    }

    /// Parse JSON lines; errors name the offending 1-based line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut manifest = Manifest::default();
        let mut paths = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fail = |message: String| Error::Line {
                line: line_no,
                message,
            };
            if manifest.records.is_empty() && line.starts_with("{\"manifest\"") {
                let header: HeaderLine =
                    serde_json::from_str(line).map_err(|e| fail(format!("bad header: {e}")))?;
                manifest.source = header.manifest;
                continue;
            }
            let record: ImageRecord =
                serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
            record.validate().map_err(|e| fail(e.to_string()))?;
            if !paths.insert(record.image_path.clone()) {
                return Err(fail(format!("duplicate image path {:?}", record.image_path)));
            }
            manifest.records.push(record);
        }
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::format("manifest", format!("{}: {e}", path.display())))?;
        Self::parse(text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }
}
