//! Synthetic density phantoms with known ground truth.
//!
//! A phantom is a half-ellipse "breast" against the left image edge on a
//! dark background. Fibroglandular tissue is the top-`n` pixels of a smooth
//! random field restricted to the breast (or one quadrant of it), so the
//! dense-area fraction is hit exactly and the dense-region mask is known.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::density::{Density, Modality};
use crate::grid::{Grid, Mask, Rect};
use crate::manifest::{ImageRecord, Manifest, ManifestSource};
use crate::util::mix_seed;
use crate::{Error, Result};

/// Dense-area fraction range (of breast tissue) per class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityRanges {
    pub ranges: [(f64, f64); Density::COUNT],
    /// Permit adjacent ranges to overlap (used for deliberately hard data).
    pub overlap_allowed: bool,
}

impl Default for DensityRanges {
    fn default() -> Self {
        Self {
            ranges: [(0.00, 0.10), (0.15, 0.30), (0.35, 0.55), (0.60, 0.85)],
            overlap_allowed: false,
        }
    }
}

impl DensityRanges {
    /// Adjacent classes share part of their range.
    pub fn overlapping() -> Self {
        Self {
            ranges: [(0.00, 0.24), (0.10, 0.44), (0.30, 0.68), (0.52, 0.85)],
            overlap_allowed: true,
        }
    }

    pub fn range(&self, d: Density) -> (f64, f64) {
        self.ranges[d.index()]
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &(lo, hi)) in self.ranges.iter().enumerate() {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::Config(format!("density range {i} ({lo}, {hi}) is invalid")));
            }
        }
        for w in self.ranges.windows(2) {
            let ((lo_a, hi_a), (lo_b, hi_b)) = (w[0], w[1]);
            if lo_b <= lo_a || hi_b <= hi_a {
                return Err(Error::Config("density ranges must increase from A to D".into()));
            }
            if !self.overlap_allowed && lo_b <= hi_a {
                return Err(Error::Config("density ranges overlap".into()));
            }
        }
        Ok(())
    }
}

/// Gray levels of the rendered tissue classes before the final gamma.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityProfile {
    pub background: f64,
    pub fat: f64,
    pub dense: f64,
    pub noise: f64,
    pub gamma: f64,
}

impl Default for IntensityProfile {
    fn default() -> Self {
        Self {
            background: 0.04,
            fat: 0.45,
            dense: 0.80,
            noise: 0.015,
            gamma: 1.0,
        }
    }
}

impl IntensityProfile {
    /// Brighter background, lower tissue contrast, stronger noise and a
    /// gamma curve: a stand-in for a different vendor/site.
    pub fn shifted() -> Self {
        Self {
            background: 0.10,
            fat: 0.50,
            dense: 0.82,
            noise: 0.03,
            gamma: 0.75,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.background)
            && self.fat > self.background + 0.1
            && self.dense > self.fat
            && self.dense < 1.0
            && (0.0..0.1).contains(&self.noise)
            && self.gamma > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("implausible intensity profile {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactFlags {
    pub burned_in_text: bool,
    pub paddle_mark: bool,
    pub implant: bool,
    pub clip: bool,
}

impl ArtifactFlags {
    pub fn any(&self) -> bool {
        self.burned_in_text || self.paddle_mark || self.implant || self.clip
    }
}

/// Quadrant of the breast bounding box, in image orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub patient_id: String,
    pub study_id: String,
    pub image_path: String,
    pub modality: Modality,
    pub site: String,
    pub acquired_at: String,
}

impl Default for RecordMeta {
    fn default() -> Self {
        Self {
            patient_id: "P0".into(),
            study_id: "P0-S1".into(),
            image_path: "images/P0-S1-CC.png".into(),
            modality: Modality::S2d,
            site: "site-1".into(),
            acquired_at: "2015-01-01".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub density: Density,
    pub height: usize,
    pub width: usize,
    /// Exact dense fraction; drawn uniformly from the class range when unset.
    pub fraction: Option<f64>,
    pub ranges: DensityRanges,
    pub artifacts: ArtifactFlags,
    pub profile: IntensityProfile,
    /// Confine dense tissue to one quadrant.
    pub quadrant: Option<Quadrant>,
    pub seed: u64,
    pub meta: RecordMeta,
}

impl PhantomSpec {
    pub fn new(density: Density, seed: u64) -> Self {
        Self {
            density,
            height: 256,
            width: 208,
            fraction: None,
            ranges: DensityRanges::default(),
            artifacts: ArtifactFlags::default(),
            profile: IntensityProfile::default(),
            quadrant: None,
            seed,
            meta: RecordMeta::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Grid,
    /// Fibroglandular (dense) pixels.
    pub dense_mask: Mask,
    /// Whole breast foreground, including any implant.
    pub breast_mask: Mask,
    /// Pixels belonging to rendered artifacts.
    pub artifact_mask: Mask,
    /// Dense pixels over breast-tissue pixels (implant excluded).
    pub fraction: f64,
    pub record: ImageRecord,
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

// 5x7 bitmaps, one row per string, '#' set.
const GLYPH_R: [&str; 7] = ["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"];
const GLYPH_L: [&str; 7] = ["#....", "#....", "#....", "#....", "#....", "#....", "#####"];
const GLYPH_C: [&str; 7] = [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."];
const GLYPH_M: [&str; 7] = ["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"];
const GLYPH_O: [&str; 7] = [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."];

fn sample_range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.ranges.validate()?;
    spec.profile.validate()?;
    let (h, w) = (spec.height, spec.width);
    if h < 64 || w < 64 {
        return Err(Error::Config(format!("phantom size {h}x{w} is below 64x64")));
    }
    let (lo, hi) = spec.ranges.range(spec.density);
    if let Some(f) = spec.fraction {
        if !(lo..=hi).contains(&f) {
            return Err(Error::Config(format!(
                "fraction {f} lies outside the class {} range [{lo}, {hi}]",
                spec.density
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let breast = Ellipse {
        cy: h as f64 * (0.5 + rng.gen_range(-0.03..0.03)),
        cx: 0.0,
        ry: h as f64 * rng.gen_range(0.36..0.42),
        rx: w as f64 * rng.gen_range(0.80..0.92),
    };
    let breast_mask = Mask::from_fn(h, w, |y, x| breast.contains(y, x));

    let implant_mask = if spec.artifacts.implant {
        let e = Ellipse {
            cy: breast.cy + breast.ry * rng.gen_range(-0.1..0.1),
            cx: breast.rx * 0.26,
            ry: breast.ry * 0.26,
            rx: breast.rx * 0.2,
        };
        Mask::from_fn(h, w, |y, x| breast_mask.get(y, x) && e.contains(y, x))
    } else {
        Mask::new(h, w)
    };
    let tissue = breast_mask.and_not(&implant_mask);
    let tissue_area = tissue.count();

    let region = match spec.quadrant {
        None => tissue.clone(),
        Some(q) => {
            let rect = quadrant_rect(&breast, q, h, w);
            Mask::from_fn(h, w, |y, x| tissue.get(y, x) && rect.contains(y, x))
        }
    };
    let region_area = region.count();

    let target = spec.fraction.unwrap_or_else(|| sample_range(&mut rng, lo, hi));
    let min_n = (lo * tissue_area as f64).ceil() as usize;
    let max_n = (hi * tissue_area as f64).floor() as usize;
    let n_dense = ((target * tissue_area as f64).round() as usize).clamp(min_n, max_n.max(min_n));
    if n_dense > region_area {
        return Err(Error::Config(format!(
            "class {} needs {n_dense} dense pixels but the allowed region holds {region_area}",
            spec.density
        )));
    }

    let field_origin = match spec.quadrant {
        Some(q) => {
            let r = quadrant_rect(&breast, q, h, w);
            (r.y0 as f64, r.x0 as f64)
        }
        None => (0.0, 0.0),
    };
    let dense_mask = dense_region(&mut rng, &region, n_dense, &breast, field_origin);

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let p = spec.profile;
    let mut image = Grid::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let base = if implant_mask.get(y, x) {
                1.0
            } else if dense_mask.get(y, x) {
                p.dense
            } else if breast_mask.get(y, x) {
                p.fat
            } else {
                p.background
            };
            let noisy = if implant_mask.get(y, x) {
                base
            } else {
                base + p.noise * normal.sample(&mut rng)
            };
            image.set(y, x, noisy.clamp(0.0, 0.97));
        }
    }
    for y in 0..h {
        for x in 0..w {
            if implant_mask.get(y, x) {
                image.set(y, x, 1.0);
            }
        }
    }

    let mut artifact_mask = implant_mask.clone();
    if spec.artifacts.paddle_mark {
        let px = (breast.rx * rng.gen_range(0.5..0.7)) as usize;
        for y in 0..h {
            for x in px..(px + 3).min(w) {
                if breast_mask.get(y, x) && !implant_mask.get(y, x) {
                    image.set(y, x, (image.get(y, x) + 0.12).min(0.97));
                    artifact_mask.set(y, x, true);
                }
            }
        }
    }
    if spec.artifacts.clip {
        let (cy, cx) = loop {
            let y = rng.gen_range(0..h);
            let x = rng.gen_range(0..w);
            if tissue.get(y, x) {
                break (y as f64, x as f64);
            }
        };
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                if d2 <= 9.0 && breast_mask.get(y, x) {
                    image.set(y, x, 1.0);
                    artifact_mask.set(y, x, true);
                }
            }
        }
    }
    if spec.artifacts.burned_in_text {
        let glyphs = [GLYPH_R, GLYPH_M, GLYPH_L, GLYPH_O, GLYPH_C, GLYPH_C];
        let start = rng.gen_range(0..3);
        let text = &glyphs[start..start + 3];
        let (ty, tx) = (6usize, w - 6 - text.len() * 6);
        for (g, glyph) in text.iter().enumerate() {
            for (r, row) in glyph.iter().enumerate() {
                for (c, ch) in row.bytes().enumerate() {
                    let (y, x) = (ty + r, tx + g * 6 + c);
                    if ch == b'#' {
                        if breast_mask.get(y, x) {
                            return Err(Error::Config("burned-in text overlaps the breast".into()));
                        }
                        image.set(y, x, 1.0);
                        artifact_mask.set(y, x, true);
                    }
                }
            }
        }
    }
    if p.gamma != 1.0 {
        image.data_mut().iter_mut().for_each(|v| *v = v.powf(p.gamma));
    }

    let m = &spec.meta;
    let record = ImageRecord {
        patient_id: m.patient_id.clone(),
        study_id: m.study_id.clone(),
        image_path: m.image_path.clone(),
        modality: m.modality,
        density: spec.density,
        site: m.site.clone(),
        acquired_at: m.acquired_at.clone(),
    };
    Ok(Phantom {
        image,
        fraction: n_dense as f64 / tissue_area as f64,
        dense_mask,
        breast_mask,
        artifact_mask,
        record,
    })
}

fn quadrant_rect(breast: &Ellipse, q: Quadrant, h: usize, w: usize) -> Rect {
    let top = (breast.cy - breast.ry).max(0.0) as usize;
    let bottom = ((breast.cy + breast.ry) as usize).min(h - 1);
    let right = (breast.rx as usize).min(w - 1);
    let (my, mx) = (breast.cy as usize, (breast.rx / 2.0) as usize);
    match q {
        Quadrant::TopLeft => Rect { y0: top, x0: 0, y1: my - 1, x1: mx - 1 },
        Quadrant::TopRight => Rect { y0: top, x0: mx, y1: my - 1, x1: right },
        Quadrant::BottomLeft => Rect { y0: my, x0: 0, y1: bottom, x1: mx - 1 },
        Quadrant::BottomRight => Rect { y0: my, x0: mx, y1: bottom, x1: right },
    }
}

/// Top-`n` pixels of a smooth random field over `region`.
fn dense_region(
    rng: &mut ChaCha8Rng,
    region: &Mask,
    n: usize,
    breast: &Ellipse,
    origin: (f64, f64),
) -> Mask {
    let (h, w) = (region.height(), region.width());
    let mut out = Mask::new(h, w);
    if n == 0 {
        return out;
    }
    let scale = breast.ry.min(breast.rx);
    let bbox = region.bounding_box().expect("non-empty region");
    let bumps: Vec<(f64, f64, f64, f64)> = (0..24)
        .map(|_| {
            let cy = rng.gen_range(0.0..bbox.height() as f64) + bbox.y0 as f64 - origin.0;
            let cx = rng.gen_range(0.0..bbox.width() as f64) + bbox.x0 as f64 - origin.1;
            let sigma = scale * rng.gen_range(0.06..0.16);
            let amp = rng.gen_range(0.5..1.0);
            (cy, cx, sigma, amp)
        })
        .collect();
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(region.count());
    for y in 0..h {
        for x in 0..w {
            if !region.get(y, x) {
                continue;
            }
            let (ly, lx) = (y as f64 - origin.0, x as f64 - origin.1);
            let v: f64 = bumps
                .iter()
                .map(|&(cy, cx, s, a)| a * (-((ly - cy).powi(2) + (lx - cx).powi(2)) / (2.0 * s * s)).exp())
                .sum();
            scored.push((v, y * w + x));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, idx) in scored.iter().take(n) {
        out.set(idx / w, idx % w, true);
    }
    out
}

/// Recipe for a labelled phantom collection.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    pub per_class: [usize; Density::COUNT],
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub ranges: DensityRanges,
    pub profile: IntensityProfile,
    /// Probability of a second study for a patient.
    pub longitudinal_rate: f64,
    /// Probability of a second view within a study.
    pub second_view_rate: f64,
    /// Per-image probabilities of each artifact.
    pub text_rate: f64,
    pub paddle_rate: f64,
    pub implant_rate: f64,
    pub clip_rate: f64,
}

impl DatasetSpec {
    pub fn new(name: &str, per_class: usize, seed: u64) -> Self {
        Self {
            name: name.into(),
            per_class: [per_class; Density::COUNT],
            seed,
            height: 256,
            width: 208,
            ranges: DensityRanges::default(),
            profile: IntensityProfile::default(),
            longitudinal_rate: 0.1,
            second_view_rate: 0.5,
            text_rate: 0.5,
            paddle_rate: 0.2,
            implant_rate: 0.1,
            clip_rate: 0.2,
        }
    }

    /// Per-image phantom recipes, patient-grouped and in manifest order.
    pub fn phantom_specs(&self) -> Result<Vec<PhantomSpec>> {
        self.ranges.validate()?;
        for r in [
            self.longitudinal_rate,
            self.second_view_rate,
            self.text_rate,
            self.paddle_rate,
            self.implant_rate,
            self.clip_rate,
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("rate {r} outside [0, 1]")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut specs = Vec::new();
        let mut patient = 0usize;
        for density in Density::ALL {
            let mut remaining = self.per_class[density.index()];
            while remaining > 0 {
                patient += 1;
                let pid = format!("P{patient:05}");
                let studies = if rng.gen_bool(self.longitudinal_rate) { 2 } else { 1 };
                let site = format!("site-{}", rng.gen_range(1..=2));
                let year = rng.gen_range(2011..=2021);
                for s in 1..=studies {
                    let views: &[&str] = if rng.gen_bool(self.second_view_rate) {
                        &["CC", "MLO"]
                    } else {
                        &["CC"]
                    };
                    let modality = match rng.gen_range(0..4) {
                        0 | 1 => Modality::S2d,
                        2 => Modality::Dm,
                        _ => Modality::Dbt,
                    };
                    let date = format!(
                        "{}-{:02}-{:02}",
                        year + s - 1,
                        rng.gen_range(1..=12),
                        rng.gen_range(1..=28)
                    );
                    for view in views {
                        if remaining == 0 {
                            break;
                        }
                        remaining -= 1;
                        let study_id = format!("{pid}-S{s}");
                        let index = specs.len() as u64;
                        let artifacts = ArtifactFlags {
                            burned_in_text: rng.gen_bool(self.text_rate),
                            paddle_mark: rng.gen_bool(self.paddle_rate),
                            implant: rng.gen_bool(self.implant_rate),
                            clip: rng.gen_bool(self.clip_rate),
                        };
                        specs.push(PhantomSpec {
                            density,
                            height: self.height,
                            width: self.width,
                            fraction: None,
                            ranges: self.ranges,
                            artifacts,
                            profile: self.profile,
                            quadrant: None,
                            seed: mix_seed(self.seed, index),
                            meta: RecordMeta {
                                image_path: format!("images/{study_id}-{view}.png"),
                                patient_id: pid.clone(),
                                study_id,
                                modality,
                                site: site.clone(),
                                acquired_at: date.clone(),
                            },
                        });
                    }
                }
            }
        }
        Ok(specs)
    }

    /// Generate every phantom (image-parallel) and the matching manifest.
    pub fn generate(&self) -> Result<(Vec<Phantom>, Manifest)> {
        use rayon::prelude::*;
        let phantoms = self
            .phantom_specs()?
            .par_iter()
            .map(generate_phantom)
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest::new(
            ManifestSource {
                dataset: self.name.clone(),
                seed: Some(self.seed),
            },
            phantoms.iter().map(|p| p.record.clone()).collect(),
        )?;
        Ok((phantoms, manifest))
    }
}
