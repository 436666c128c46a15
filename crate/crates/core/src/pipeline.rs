//! Dataset-level plumbing shared by the command-line tool and the tests:
//! phantom recipes as key-value files, on-disk image sets, and the exact
//! image preparation used for training and evaluation.

use std::path::Path;

use rayon::prelude::*;

use crate::grid::Grid;
use crate::image_io::{quantize_u16, read_png, write_png16};
use crate::kv::KvFile;
use crate::manifest::Manifest;
use crate::phantom::{DatasetSpec, DensityRanges, IntensityProfile, Phantom};
use crate::preprocess::preprocess;
use crate::{Error, Result};

/// Raw phantom to model input, with 16-bit rounding on both sides of
/// preprocessing so the in-memory path matches a PNG round trip exactly.
pub fn prepare_image(raw: &Grid) -> Result<Grid> {
    Ok(quantize_u16(&preprocess(&quantize_u16(raw))?.image))
}

fn parse_ranges(text: &str) -> Result<DensityRanges> {
    match text {
        "default" => return Ok(DensityRanges::default()),
        "overlapping" => return Ok(DensityRanges::overlapping()),
        _ => {}
    }
    let parts: Vec<(f64, f64)> = text
        .split(',')
        .map(|r| {
            let (lo, hi) = r
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("range {r:?} is not lo:hi")))?;
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("range {r:?}: {e}")))
            };
            Ok((num(lo)?, num(hi)?))
        })
        .collect::<Result<_>>()?;
    let ranges: [(f64, f64); 4] = parts
        .try_into()
        .map_err(|_| Error::Config("need exactly four density ranges".into()))?;
    let overlap_allowed = ranges.windows(2).any(|w| w[1].0 <= w[0].1);
    Ok(DensityRanges {
        ranges,
        overlap_allowed,
    })
}

impl DatasetSpec {
    /// Keys: `name`, `per_class` (one count or four comma-separated),
    /// `seed`, `height`, `width`, `ranges` (`default`, `overlapping`, or
    /// `lo:hi` x4), `profile` (`default` or `shifted`), and the rates
    /// `longitudinal_rate`, `second_view_rate`, `text_rate`,
    /// `paddle_rate`, `implant_rate`, `clip_rate`.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut r = kv.reader();
        let name: String = r.require("name")?;
        let per_class: String = r.require("per_class")?;
        let counts: Vec<usize> = per_class
            .split(',')
            .map(|c| c.trim().parse().map_err(|e| Error::Config(format!("per_class {c:?}: {e}"))))
            .collect::<Result<_>>()?;
        let per_class = match counts[..] {
            [n] => [n; 4],
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::Config("per_class needs one or four counts".into())),
        };
        let mut spec = DatasetSpec::new(&name, 0, r.require("seed")?);
        spec.per_class = per_class;
        spec.height = r.get_or("height", spec.height)?;
        spec.width = r.get_or("width", spec.width)?;
        if let Some(text) = r.get::<String>("ranges")? {
            spec.ranges = parse_ranges(&text)?;
        }
        spec.profile = match r.get_or("profile", "default".to_string())?.as_str() {
            "default" => IntensityProfile::default(),
            "shifted" => IntensityProfile::shifted(),
            other => return Err(Error::Config(format!("unknown intensity profile {other:?}"))),
        };
        spec.longitudinal_rate = r.get_or("longitudinal_rate", spec.longitudinal_rate)?;
        spec.second_view_rate = r.get_or("second_view_rate", spec.second_view_rate)?;
        spec.text_rate = r.get_or("text_rate", spec.text_rate)?;
        spec.paddle_rate = r.get_or("paddle_rate", spec.paddle_rate)?;
        spec.implant_rate = r.get_or("implant_rate", spec.implant_rate)?;
        spec.clip_rate = r.get_or("clip_rate", spec.clip_rate)?;
        r.finish()?;
        spec.phantom_specs()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        let mut push = |k: &str, v: String| kv.push(k, v).expect("valid entry");
        push("name", self.name.clone());
        push(
            "per_class",
            self.per_class.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","),
        );
        push("seed", self.seed.to_string());
        push("height", self.height.to_string());
        push("width", self.width.to_string());
        push(
            "ranges",
            self.ranges
                .ranges
                .iter()
                .map(|(lo, hi)| format!("{lo}:{hi}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        push(
            "profile",
            if self.profile == IntensityProfile::shifted() { "shifted" } else { "default" }.into(),
        );
        push("longitudinal_rate", self.longitudinal_rate.to_string());
        push("second_view_rate", self.second_view_rate.to_string());
        push("text_rate", self.text_rate.to_string());
        push("paddle_rate", self.paddle_rate.to_string());
        push("implant_rate", self.implant_rate.to_string());
        push("clip_rate", self.clip_rate.to_string());
        kv
    }
}

/// Write every phantom as a 16-bit PNG under `dir` at its manifest path,
/// then `dir/manifest.jsonl`.
pub fn write_dataset(dir: &Path, phantoms: &[Phantom], manifest: &Manifest) -> Result<()> {
    phantoms
        .par_iter()
        .try_for_each(|p| write_png16(&dir.join(&p.record.image_path), &p.image))?;
    manifest.write(&dir.join("manifest.jsonl"))
}

/// Read the images of `manifest`, resolving paths against `base`.
pub fn load_images(manifest: &Manifest, base: &Path) -> Result<Vec<Grid>> {
    manifest
        .records
        .par_iter()
        .map(|r| read_png(&base.join(&r.image_path)))
        .collect()
}

/// Per-item outcome of a batch operation, for partial-failure listings.
#[derive(Debug, serde::Serialize)]
pub struct ItemError {
    pub item: String,
    pub error: String,
}

/// Preprocess every image of `manifest` from `input` into `output` at the
/// same relative paths. Returns the manifest of the images that succeeded
/// and the failures.
pub fn preprocess_dataset(
    manifest: &Manifest,
    input: &Path,
    output: &Path,
) -> Result<(Manifest, Vec<ItemError>)> {
    let results: Vec<Result<()>> = manifest
        .records
        .par_iter()
        .map(|r| {
            let raw = read_png(&input.join(&r.image_path))?;
            let prepared = quantize_u16(&preprocess(&raw)?.image);
            write_png16(&output.join(&r.image_path), &prepared)
        })
        .collect();
    let mut keep = Vec::new();
    let mut failures = Vec::new();
    for (i, res) in results.into_iter().enumerate() {
        match res {
            Ok(()) => keep.push(i),
            Err(Error::Io { path, source }) if !path.starts_with(input) => {
                return Err(Error::Io { path, source });
            }
            Err(e) => failures.push(ItemError {
                item: manifest.records[i].image_path.clone(),
                error: e.to_string(),
            }),
        }
    }
    let out = manifest.select(&keep);
    out.write(&output.join("manifest.jsonl"))?;
    Ok((out, failures))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::Density;

    #[test]
    fn spec_kv_round_trip() {
        let mut spec = DatasetSpec::new("x", 3, 5);
        spec.ranges = DensityRanges::overlapping();
        spec.profile = IntensityProfile::shifted();
        spec.per_class = [3, 4, 5, 6];
        assert_eq!(DatasetSpec::from_kv(&spec.to_kv()).unwrap(), spec);
        let bad = KvFile::parse("name = x\nper_class = 3\nseed = 1\ncolour = red\n").unwrap();
        assert!(DatasetSpec::from_kv(&bad).is_err());
    }

    #[test]
    fn disk_round_trip_matches_in_memory_preparation() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = DatasetSpec::new("x", 1, 2);
        spec.per_class = [1, 0, 0, 1];
        let (phantoms, manifest) = spec.generate().unwrap();
        write_dataset(dir.path(), &phantoms, &manifest).unwrap();
        let loaded = Manifest::load(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(loaded, manifest);
        let out = dir.path().join("pre");
        let (pre, failures) = preprocess_dataset(&loaded, dir.path(), &out).unwrap();
        assert!(failures.is_empty());
        let images = load_images(&pre, &out).unwrap();
        for (img, p) in images.iter().zip(&phantoms) {
            assert_eq!(img, &prepare_image(&p.image).unwrap());
        }
        assert_eq!(pre.records[1].density, Density::D);
    }
}
