//! Raw image to model input: annotation removal, foreground crop, resize
//! and per-image contrast normalization.

use crate::grid::{connected_components, Grid, Mask, Rect};
use crate::{Error, Result};

pub const TARGET_SIZE: usize = 224;
/// Fraction of the dynamic range above which a pixel counts as saturated.
pub const SATURATION_LEVEL: f64 = 0.98;
/// Saturated components smaller than this fraction of the image are erased.
pub const ANNOTATION_MAX_AREA: f64 = 0.02;
const MIN_SIDE: usize = 32;
const HISTOGRAM_BINS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub image: Grid,
    /// Crop window in source coordinates.
    pub crop: Rect,
    pub source_height: usize,
    pub source_width: usize,
    /// Number of source pixels erased as annotations.
    pub erased: usize,
}

impl Preprocessed {
    /// Carry a source-resolution mask through the same crop and resize.
    pub fn transform_mask(&self, mask: &Mask) -> Result<Mask> {
        if mask.height() != self.source_height || mask.width() != self.source_width {
            return Err(Error::Data(format!(
                "mask is {}x{}, source image was {}x{}",
                mask.height(),
                mask.width(),
                self.source_height,
                self.source_width
            )));
        }
        Ok(mask
            .crop(self.crop)
            .resize_nearest(self.image.height(), self.image.width()))
    }
}

/// Between-class to total variance ratio above which a class is treated as
/// two populations rather than one noisy one.
const BIMODAL_SEPARATION: f64 = 0.9;

/// Best Otsu split of `hist`: last bin of the lower class and its
/// separability (between-class over total variance).
fn otsu_split(hist: &[usize]) -> Option<(usize, f64)> {
    let total: f64 = hist.iter().map(|&c| c as f64).sum();
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mean = sum_all / total;
    let var_total: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| c as f64 * (i as f64 - mean).powi(2))
        .sum::<f64>()
        / total;
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best: Option<(usize, f64)> = None;
    for (i, &c) in hist.iter().enumerate().take(hist.len().saturating_sub(1)) {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1) / (total * total);
        if best.map_or(true, |(_, b)| between > b) {
            best = Some((i, between));
        }
    }
    best.map(|(i, between)| (i, between / var_total))
}

/// Foreground threshold: Otsu over a 256-bin histogram spanning the image
/// range, re-applied to the darker class while that class is itself
/// clearly bimodal (so fat and dense tissue both count as foreground).
pub fn otsu_threshold(image: &Grid) -> Option<f64> {
    let (lo, hi) = image.min_max();
    if !(hi > lo) {
        return None;
    }
    let mut hist = [0usize; HISTOGRAM_BINS];
    let scale = (HISTOGRAM_BINS - 1) as f64 / (hi - lo);
    for &v in image.data() {
        hist[((v - lo) * scale).round() as usize] += 1;
    }
    let (mut bin, _) = otsu_split(&hist)?;
    while let Some((lower, eta)) = otsu_split(&hist[..=bin]) {
        if eta < BIMODAL_SEPARATION {
            break;
        }
        bin = lower;
    }
    Some(lo + (bin as f64 + 0.5) / scale)
}

pub fn preprocess(image: &Grid) -> Result<Preprocessed> {
    preprocess_to(image, TARGET_SIZE)
}

pub fn preprocess_to(image: &Grid, size: usize) -> Result<Preprocessed> {
    let (h, w) = (image.height(), image.width());
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::Data(format!("image {h}x{w} is smaller than {MIN_SIDE}x{MIN_SIDE}")));
    }
    if !image.is_finite() {
        return Err(Error::Data("image contains non-finite pixels".into()));
    }
    let threshold = otsu_threshold(image).ok_or_else(|| Error::Data("no foreground found".into()))?;
    let foreground = Mask::from_fn(h, w, |y, x| image.get(y, x) > threshold);
    let components = connected_components(&foreground);
    let largest = components
        .iter()
        .max_by_key(|c| c.len())
        .ok_or_else(|| Error::Data("no foreground found".into()))?;
    let mut body = Mask::new(h, w);
    for &i in largest {
        body.set(i / w, i % w, true);
    }

    let (lo, hi) = image.min_max();
    let saturated_at = lo + SATURATION_LEVEL * (hi - lo);
    let saturated = Mask::from_fn(h, w, |y, x| image.get(y, x) >= saturated_at && !body.get(y, x));
    let max_area = ANNOTATION_MAX_AREA * (h * w) as f64;
    let mut cleaned = image.clone();
    let mut erased = 0;
    for comp in connected_components(&saturated) {
        if (comp.len() as f64) < max_area {
            erased += comp.len();
            for i in comp {
                cleaned.data_mut()[i] = lo;
            }
        }
    }

    let crop = body.bounding_box().expect("largest component is non-empty");
    if crop.height() < 2 || crop.width() < 2 {
        return Err(Error::Data(format!("degenerate foreground bounding box {crop:?}")));
    }
    let mut out = cleaned.crop(crop).resize_bilinear(size, size);
    let (lo, hi) = out.min_max();
    if !(hi > lo) {
        return Err(Error::Data("cropped image has no contrast".into()));
    }
    let range = hi - lo;
    out.data_mut().iter_mut().for_each(|v| *v = (*v - lo) / range);
    Ok(Preprocessed {
        image: out,
        crop,
        source_height: h,
        source_width: w,
        erased,
    })
}
