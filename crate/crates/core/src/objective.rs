//! Class-weighted contrastive objective over fixed class prompts.

use mammoclip_autodiff::{Array, Graph, Var};

use crate::density::{ClassPromptSet, Density};
use crate::manifest::Manifest;
use crate::model::BoundModel;
use crate::{Error, Result};

/// Inverse-frequency class weights, normalized so the per-sample mean
/// weight over the counted data is one.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    weights: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(k: usize) -> Self {
        Self {
            weights: vec![1.0; k],
        }
    }

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Config(format!("class weights must be positive: {weights:?}")));
        }
        Ok(Self { weights })
    }

    /// `w_c = (N / K) / n_c`.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Data("no classes".into()));
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Data(format!("class {c} has no samples")));
        }
        let total: usize = counts.iter().sum();
        let per_class = total as f64 / counts.len() as f64;
        Ok(Self {
            weights: counts.iter().map(|&n| per_class / n as f64).collect(),
        })
    }

    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        let counts = manifest.class_counts();
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Data(format!(
                "density class {} is missing from the manifest",
                Density::ALL[c]
            )));
        }
        Self::from_counts(&counts)
    }

    pub fn get(&self, class: usize) -> f64 {
        self.weights[class]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Mean weight per sample for data with the given class counts.
    pub fn sample_mean(&self, counts: &[usize]) -> f64 {
        let total: usize = counts.iter().sum();
        counts
            .iter()
            .zip(&self.weights)
            .map(|(&n, w)| n as f64 * w)
            .sum::<f64>()
            / total as f64
    }

    /// Per-sample weights for a batch of labels.
    pub fn per_sample(&self, labels: &[usize]) -> Result<Vec<f64>> {
        labels
            .iter()
            .map(|&l| {
                self.weights
                    .get(l)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("label {l} out of range for {} classes", self.len())))
            })
            .collect()
    }
}

/// `Σ w(y_i) CE_i / Σ w(y_i)` over a `[B, K]` block of scaled similarities.
pub fn weighted_contrastive_loss<'g>(
    similarities: Var<'g>,
    labels: &[usize],
    weights: &ClassWeights,
) -> Result<Var<'g>> {
    let shape = similarities.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Data(format!("expected a non-empty [B, K] block, got {shape:?}")));
    }
    if shape[1] != weights.len() {
        return Err(Error::Data(format!(
            "{} similarity columns but {} class weights",
            shape[1],
            weights.len()
        )));
    }
    if !similarities.value().is_finite() {
        return Err(Error::Numerical("non-finite similarities".into()));
    }
    let w = weights.per_sample(labels)?;
    Ok(similarities.softmax_cross_entropy(labels, &w)?)
}

/// Loss value for a plain `[B, K]` similarity array.
pub fn loss_value(similarities: &Array, labels: &[usize], weights: &ClassWeights) -> Result<f64> {
    let g = Graph::new();
    let s = g.constant(similarities.clone()).map_err(|_| Error::Numerical("non-finite similarities".into()))?;
    Ok(weighted_contrastive_loss(s, labels, weights)?
        .scalar()
        .expect("scalar loss"))
}

/// Positive-pair mask: row `i` is true only at the column of `labels[i]`.
pub fn build_batch_targets(labels: &[usize], prompts: &ClassPromptSet) -> Result<Vec<Vec<bool>>> {
    let k = prompts.len();
    labels
        .iter()
        .map(|&l| {
            if l >= k {
                return Err(Error::Data(format!("label {l} out of range for {k} prompts")));
            }
            Ok((0..k).map(|c| c == l).collect())
        })
        .collect()
}

/// `[1, K]` temperature-scaled cosine similarities of one image to the
/// prompt embeddings.
pub fn image_logits<'g>(
    bound: &BoundModel<'g>,
    image_embedding: Var<'g>,
    prompt_embeddings: Var<'g>,
) -> Result<Var<'g>> {
    let scale = bound.log_temperature().exp()?;
    Ok(image_embedding
        .matmul(prompt_embeddings.transpose()?)?
        .scale_by(scale)?)
}
