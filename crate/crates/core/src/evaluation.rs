//! Zero-shot classification and the per-class metric suite.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::density::{ClassPromptSet, Density};
use crate::grid::Grid;
use crate::model::{DualEncoderModel, Similarities};
use crate::util::write_atomic;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShot {
    /// Softmax of the scaled similarities, one row per image.
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn classify_similarities(sims: &Similarities) -> ZeroShot {
    let scaled = sims.scaled();
    let k = sims.cols();
    let scores: Vec<Vec<f64>> = scaled.data().chunks(k).map(softmax).collect();
    let labels = scores.iter().map(|s| argmax(s)).collect();
    ZeroShot { scores, labels }
}

pub fn zero_shot_classify(model: &DualEncoderModel, images: &[Grid], prompts: &ClassPromptSet) -> Result<ZeroShot> {
    if images.is_empty() {
        return Err(Error::Data("no images to classify".into()));
    }
    Ok(classify_similarities(&model.similarity_matrix(images, &prompts.tokenized())?))
}

/// One-vs-rest AUC as the Mann-Whitney statistic with midranks, so tied
/// positive/negative pairs count one half.
pub fn auc_one_vs_rest(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Data(format!(
            "{} scores but {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite score".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("AUC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&o| positive[o]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionSummary {
    /// Rows are truth, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    /// Recall per class; `None` when the class never occurs.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub overall_accuracy: f64,
    /// Share of errors between neighbouring classes; `None` without errors.
    pub adjacent_error_fraction: Option<f64>,
}

pub fn confusion_and_accuracy(predictions: &[usize], labels: &[usize], k: usize) -> Result<ConfusionSummary> {
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Data("no samples".into()));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &t) in predictions.iter().zip(labels) {
        if p >= k || t >= k {
            return Err(Error::Data(format!("class index out of range for {k} classes")));
        }
        confusion[t][p] += 1;
    }
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let errors = labels.len() - correct;
    let adjacent: usize = (0..k)
        .flat_map(|t| (0..k).map(move |p| (t, p)))
        .filter(|&(t, p)| t.abs_diff(p) == 1)
        .map(|(t, p)| confusion[t][p])
        .sum();
    Ok(ConfusionSummary {
        confusion,
        per_class_accuracy,
        overall_accuracy: correct as f64 / labels.len() as f64,
        adjacent_error_fraction: (errors > 0).then(|| adjacent as f64 / errors as f64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset: String,
    pub samples: usize,
    pub classes: Vec<String>,
    /// One-vs-rest AUC per class; `None` when the class is absent.
    pub per_class_auc: Vec<Option<f64>>,
    #[serde(flatten)]
    pub summary: ConfusionSummary,
}

impl EvaluationReport {
    pub fn from_scores(dataset: &str, scores: &[Vec<f64>], labels: &[usize]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Data(format!("{} score rows but {} labels", scores.len(), labels.len())));
        }
        let k = Density::COUNT;
        if scores.iter().any(|r| r.len() != k) {
            return Err(Error::Data(format!("score rows must have {k} entries")));
        }
        let predictions: Vec<usize> = scores.iter().map(|r| argmax(r)).collect();
        let summary = confusion_and_accuracy(&predictions, labels, k)?;
        let per_class_auc = (0..k)
            .map(|c| {
                let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
                let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
                match auc_one_vs_rest(&col, &pos) {
                    Ok(a) => Ok(Some(a)),
                    Err(Error::Data(_)) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dataset: dataset.to_string(),
            samples: labels.len(),
            classes: Density::ALL.iter().map(|d| d.letter().to_string()).collect(),
            per_class_auc,
            summary,
        })
    }

    pub fn evaluate(
        model: &DualEncoderModel,
        images: &[Grid],
        labels: &[usize],
        prompts: &ClassPromptSet,
        dataset: &str,
    ) -> Result<Self> {
        let z = zero_shot_classify(model, images, prompts)?;
        Self::from_scores(dataset, &z.scores, labels)
    }

    pub fn min_auc(&self) -> Option<f64> {
        self.per_class_auc
            .iter()
            .map(|a| a.unwrap_or(f64::NAN))
            .fold(None, |m: Option<f64>, a| Some(m.map_or(a, |m| m.min(a))))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// Confusion matrix with a header row of predicted classes.
    pub fn confusion_csv(&self) -> String {
        let mut out = format!("truth\\predicted,{}\n", self.classes.join(","));
        for (c, row) in self.summary.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("{},{}\n", self.classes[c], cells.join(",")));
        }
        out
    }

    pub fn write(&self, json: &Path, csv: &Path) -> Result<()> {
        write_atomic(json, self.to_json().as_bytes())?;
        write_atomic(csv, self.confusion_csv().as_bytes())
    }
}
