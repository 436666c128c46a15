//! GradCAM over the last convolutional block of the vision tower.

use std::path::Path;

use mammoclip_autodiff::{Array, Graph};
use serde::{Deserialize, Serialize};

use crate::density::{ClassPromptSet, Density};
use crate::grid::Grid;
use crate::image_io::encode_rgb8;
use crate::model::DualEncoderModel;
use crate::objective::image_logits;
use crate::util::{read, write_atomic};
use crate::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.4;
const GRID_MAGIC: &[u8; 8] = b"SALGRID1";
const MAX_GRID_SIDE: usize = 1 << 14;

/// Score whose gradient drives the map.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaliencyTarget {
    /// Temperature-scaled cosine similarity to the class prompt.
    #[default]
    Similarity,
    /// Softmax probability of the class.
    Probability,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// Input-resolution map in `[0, 1]`.
    pub grid: Grid,
    /// Rectified map at saliency-layer resolution, before upsampling and
    /// normalization.
    pub raw: Grid,
    pub target: Density,
    pub source: Option<String>,
}

impl SaliencyMap {
    /// Fraction of total map mass on pixels where `mask` is set.
    pub fn mass_fraction(&self, mask: &crate::grid::Mask) -> f64 {
        let total: f64 = self.grid.data().iter().sum();
        if total == 0.0 {
            return 0.0;
        }
        let inside: f64 = self
            .grid
            .data()
            .iter()
            .zip(mask.data())
            .filter(|(_, &m)| m)
            .map(|(v, _)| v)
            .sum();
        inside / total
    }

    /// Mass-weighted `(row, column)` centroid.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let w = self.grid.width();
        let (mut sy, mut sx, mut total) = (0.0, 0.0, 0.0);
        for (i, &v) in self.grid.data().iter().enumerate() {
            sy += v * (i / w) as f64;
            sx += v * (i % w) as f64;
            total += v;
        }
        (total > 0.0).then(|| (sy / total, sx / total))
    }
}

/// `relu(Σ_c mean(grad_c) · act_c)` for `[1, C, h, w]` activations.
pub fn combine(activations: &Array, gradients: &Array) -> Result<Grid> {
    let shape = activations.shape();
    if shape.len() != 4 || shape[0] != 1 || gradients.shape() != shape {
        return Err(Error::Data(format!(
            "activations {shape:?} and gradients {:?} must share a [1, C, h, w] shape",
            gradients.shape()
        )));
    }
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let plane = h * w;
    let mut map = vec![0.0; plane];
    for ch in 0..c {
        let g = &gradients.data()[ch * plane..(ch + 1) * plane];
        let weight = g.iter().sum::<f64>() / plane as f64;
        let a = &activations.data()[ch * plane..(ch + 1) * plane];
        map.iter_mut().zip(a).for_each(|(m, &v)| *m += weight * v);
    }
    map.iter_mut().for_each(|v| *v = v.max(0.0));
    Grid::new(h, w, map)
}

/// Bilinear upsample to `size` and divide by the maximum (zero stays zero).
pub fn finish_map(raw: &Grid, size: usize) -> Grid {
    let mut up = raw.resize_bilinear(size, size);
    let (_, max) = up.min_max();
    if max > 0.0 {
        up.data_mut().iter_mut().for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    } else {
        up.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    up
}

pub fn gradcam(
    model: &DualEncoderModel,
    image: &Grid,
    target: Density,
    prompts: &ClassPromptSet,
    score: SaliencyTarget,
) -> Result<SaliencyMap> {
    let g = Graph::new();
    let bound = model.bind(&g, false)?;
    let features = model.vision_features(&bound, model.image_input(&g, image)?)?;
    let activations = features.value();
    let leaf = g.param(activations.clone())?;
    let emb = model.vision_head(&bound, leaf)?;
    let text = model.prompt_embeddings(&bound, &prompts.tokenized())?;
    let mut logits = image_logits(&bound, emb, text)?;
    if score == SaliencyTarget::Probability {
        logits = logits.softmax()?;
    }
    let picked = logits.transpose()?.gather_rows(&[target.index()])?.sum()?;
    g.backward(picked)?;
    let grads = g.grad(leaf).expect("activations require grad");
    let raw = combine(&activations, &grads)?;
    Ok(SaliencyMap {
        grid: finish_map(&raw, model.config().vision.input_size),
        raw,
        target,
        source: None,
    })
}

/// Black-red-yellow-white ramp.
pub fn hot(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [(3.0 * t).min(1.0), (3.0 * t - 1.0).clamp(0.0, 1.0), (3.0 * t - 2.0).clamp(0.0, 1.0)]
}

/// Alpha-blend the colour-mapped saliency over the grayscale image and
/// encode as an 8-bit RGB PNG.
pub fn overlay(image: &Grid, map: &Grid, alpha: f64) -> Result<Vec<u8>> {
    if image.height() != map.height() || image.width() != map.width() {
        return Err(Error::Data(format!(
            "image is {}x{} but map is {}x{}",
            image.height(),
            image.width(),
            map.height(),
            map.width()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut rgb = Vec::with_capacity(image.data().len() * 3);
    for (&v, &m) in image.data().iter().zip(map.data()) {
        let gray = v.clamp(0.0, 1.0);
        for c in hot(m) {
            let blended = (1.0 - alpha) * gray + alpha * c;
            rgb.push((blended * 255.0).round() as u8);
        }
    }
    encode_rgb8(image.height(), image.width(), rgb)
}

/// Raw grid as `SALGRID1`, `u32` height and width, then `f32` samples, all
/// little-endian.
pub fn encode_grid(grid: &Grid) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * grid.data().len());
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&(grid.height() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.width() as u32).to_le_bytes());
    for &v in grid.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<Grid> {
    let bad = |d: &str| Error::format("saliency grid", d);
    if bytes.len() < 16 || &bytes[..8] != GRID_MAGIC {
        return Err(bad("missing header"));
    }
    let dim = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (h, w) = (dim(8), dim(12));
    if h == 0 || w == 0 || h > MAX_GRID_SIDE || w > MAX_GRID_SIDE {
        return Err(bad(&format!("implausible shape {h}x{w}")));
    }
    let body = &bytes[16..];
    if body.len() != 4 * h * w {
        return Err(bad(&format!("expected {} payload bytes, found {}", 4 * h * w, body.len())));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite sample"));
    }
    Grid::new(h, w, data)
}

pub fn write_grid(path: &Path, grid: &Grid) -> Result<()> {
    write_atomic(path, &encode_grid(grid))
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    decode_grid(&read(path)?)
}
