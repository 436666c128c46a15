//! Deterministic fine-tuning of the dual encoder and k-fold orchestration.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use mammoclip_autodiff::{Array, Graph};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::curation::FoldAssignment;
use crate::density::{ClassPromptSet, Density};
use crate::evaluation::{classify_similarities, EvaluationReport};
use crate::grid::Grid;
use crate::kv::KvFile;
use crate::manifest::Manifest;
use crate::model::DualEncoderModel;
use crate::objective::{image_logits, loss_value, ClassWeights};
use crate::util::{mean_sd, mix_seed, write_atomic};
use crate::{Error, Result};

/// Upper clamp on the learned log similarity scale (scale 100).
pub const MAX_LOG_TEMPERATURE: f64 = 4.605_170_185_988_092;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-epoch learning-rate schedule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Half-cosine from the base rate towards zero over the run.
    #[default]
    Cosine,
}

impl Schedule {
    /// Rate for 1-based `epoch` of `epochs`.
    pub fn rate(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let t = (epoch - 1) as f64 / epochs as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(Error::Config(format!("unknown schedule {other:?}"))),
        }
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub seed: u64,
    /// Training images get a random gamma curve `v^exp(u)`, `u` uniform in
    /// `[-gamma_jitter, gamma_jitter]`; 0 disables it.
    pub gamma_jitter: f64,
    /// Largest standard deviation of extra Gaussian pixel noise added to
    /// training images before the gamma curve; 0 disables it.
    pub noise_jitter: f64,
    /// Stop after this many epochs without a validation-loss improvement.
    pub patience: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::default(),
            schedule: Schedule::default(),
            seed: 0,
            gamma_jitter: 0.4,
            noise_jitter: 0.015,
            patience: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(0.0..2.0).contains(&self.gamma_jitter) {
            return Err(Error::Config(format!("gamma_jitter {} outside [0, 2)", self.gamma_jitter)));
        }
        if !(0.0..0.5).contains(&self.noise_jitter) {
            return Err(Error::Config(format!("noise_jitter {} outside [0, 0.5)", self.noise_jitter)));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be positive".into()));
        }
        match self.optimizer {
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::Config(format!("sgd momentum {momentum} outside [0, 1)")))
            }
            OptimizerKind::Adam { beta1, beta2, eps }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) =>
            {
                Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Read from the plain-text key-value form; unknown keys are errors.
    ///
    /// ```text
    /// epochs = 20
    /// batch_size = 32
    /// learning_rate = 0.001
    /// optimizer = adam          # or sgd
    /// adam.beta1 = 0.9
    /// adam.beta2 = 0.999
    /// adam.eps = 1e-8
    /// sgd.momentum = 0.0
    /// schedule = cosine         # or constant
    /// seed = 0
    /// gamma_jitter = 0.4        # 0 disables gamma augmentation
    /// noise_jitter = 0.015      # 0 disables noise augmentation
    /// patience = 5              # optional
    /// checkpoint_dir = runs/ck  # optional
    /// ```
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let d = Self::default();
        let mut r = kv.reader();
        let optimizer = match r.get_or("optimizer", "adam".to_string())?.as_str() {
            "adam" => OptimizerKind::Adam {
                beta1: r.get_or("adam.beta1", 0.9)?,
                beta2: r.get_or("adam.beta2", 0.999)?,
                eps: r.get_or("adam.eps", 1e-8)?,
            },
            "sgd" => OptimizerKind::Sgd {
                momentum: r.get_or("sgd.momentum", 0.0)?,
            },
            other => return Err(Error::Config(format!("unknown optimizer {other:?}"))),
        };
        let c = Self {
            epochs: r.get_or("epochs", d.epochs)?,
            batch_size: r.get_or("batch_size", d.batch_size)?,
            learning_rate: r.get_or("learning_rate", d.learning_rate)?,
            optimizer,
            schedule: r.get_or("schedule", d.schedule)?,
            seed: r.get_or("seed", d.seed)?,
            gamma_jitter: r.get_or("gamma_jitter", d.gamma_jitter)?,
            noise_jitter: r.get_or("noise_jitter", d.noise_jitter)?,
            patience: r.get("patience")?,
            checkpoint_dir: r.get::<String>("checkpoint_dir")?.map(PathBuf::from),
        };
        r.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        let mut push = |k: &str, v: String| kv.push(k, v).expect("valid entry");
        push("epochs", self.epochs.to_string());
        push("batch_size", self.batch_size.to_string());
        push("learning_rate", self.learning_rate.to_string());
        match self.optimizer {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                push("optimizer", "adam".into());
                push("adam.beta1", beta1.to_string());
                push("adam.beta2", beta2.to_string());
                push("adam.eps", eps.to_string());
            }
            OptimizerKind::Sgd { momentum } => {
                push("optimizer", "sgd".into());
                push("sgd.momentum", momentum.to_string());
            }
        }
        push("schedule", self.schedule.to_string());
        push("seed", self.seed.to_string());
        push("gamma_jitter", self.gamma_jitter.to_string());
        push("noise_jitter", self.noise_jitter.to_string());
        if let Some(p) = self.patience {
            push("patience", p.to_string());
        }
        if let Some(dir) = &self.checkpoint_dir {
            push("checkpoint_dir", dir.display().to_string());
        }
        kv
    }
}

impl FromStr for TrainConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_kv(&KvFile::parse(s)?)
    }
}

/// First- and second-moment state per parameter tensor.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, model: &DualEncoderModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            kind,
            lr,
            step: 0,
            v: zeros.clone(),
            m: zeros,
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, model: &mut DualEncoderModel, grads: &[Array]) {
        self.step += 1;
        let lr = self.lr;
        for (i, (p, g)) in model.params_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let values = p.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for ((w, &g), m) in values.iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        *m = momentum * *m + g;
                        *w -= lr * *m;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.step);
                    let c2 = 1.0 - beta2.powi(self.step);
                    for (((w, &g), m), v) in values.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Wall-clock time; the only logged value that is not reproducible.
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("serializable") + "\n")
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let epochs = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Line {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { epochs })
    }

    /// Everything except wall-clock time.
    pub fn reproducible_part(&self) -> Vec<(usize, u64, u64, u64)> {
        self.epochs
            .iter()
            .map(|e| (e.epoch, e.train_loss.to_bits(), e.val_loss.to_bits(), e.val_accuracy.to_bits()))
            .collect()
    }
}

/// Preprocessed images and their class labels.
#[derive(Clone, Copy)]
pub struct Dataset<'a> {
    pub images: &'a [Grid],
    pub labels: &'a [usize],
}

impl<'a> Dataset<'a> {
    pub fn new(images: &'a [Grid], labels: &'a [usize]) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Data(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= Density::COUNT) {
            return Err(Error::Data(format!("label {l} out of range")));
        }
        Ok(Self { images, labels })
    }

    fn check(&self, indices: &[usize], what: &str) -> Result<()> {
        if indices.is_empty() {
            return Err(Error::Data(format!("{what} set is empty")));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= self.images.len()) {
            return Err(Error::Data(format!("{what} index {i} out of range")));
        }
        Ok(())
    }
}

/// Gradient of `share * CE` for one image, per parameter tensor.
fn sample_gradient(
    model: &DualEncoderModel,
    prompts: &[Vec<String>],
    image: &Grid,
    label: usize,
    share: f64,
) -> Result<(f64, Vec<Array>)> {
    let g = Graph::new();
    let bound = model.bind(&g, true)?;
    let text = model.prompt_embeddings(&bound, prompts)?;
    let features = model.vision_features(&bound, model.image_input(&g, image)?)?;
    let emb = model.vision_head(&bound, features)?;
    let loss = image_logits(&bound, emb, text)?
        .softmax_cross_entropy(&[label], &[1.0])?
        .scale(share)?;
    g.backward(loss)?;
    let grads = bound
        .vars()
        .iter()
        .map(|v| g.grad(*v).unwrap_or_else(|| Array::zeros(&v.shape())))
        .collect();
    Ok((loss.scalar().expect("scalar"), grads))
}

/// Weighted batch loss and its summed gradient. Samples run in parallel;
/// gradients are reduced in batch order so results do not depend on
/// scheduling.
pub fn batch_gradient(
    model: &DualEncoderModel,
    prompts: &ClassPromptSet,
    weights: &ClassWeights,
    data: Dataset<'_>,
    batch: &[usize],
) -> Result<(f64, Vec<Array>)> {
    let tokens = prompts.tokenized();
    let w: Vec<f64> = weights.per_sample(&batch.iter().map(|&i| data.labels[i]).collect::<Vec<_>>())?;
    let total: f64 = w.iter().sum();
    let parts = batch
        .par_iter()
        .zip(&w)
        .map(|(&i, &wi)| sample_gradient(model, &tokens, &data.images[i], data.labels[i], wi / total))
        .collect::<Result<Vec<_>>>()?;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or_else(|| Error::Data("empty batch".into()))?;
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b);
        }
    }
    Ok((loss, grads))
}

/// Gamma curve on a `[0, 1]` image; endpoints stay fixed.
pub fn adjust_gamma(image: &Grid, gamma: f64) -> Grid {
    let mut out = image.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0).powf(gamma));
    out
}

/// Training-time intensity augmentation: extra pixel noise, then a gamma
/// curve, both drawn per epoch and image from `seed`.
fn augment(image: &Grid, config: &TrainConfig, epoch: usize, index: usize) -> Grid {
    let stream = mix_seed(config.seed ^ 0x6175_676d_656e_7400, epoch as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(stream, index as u64));
    let gamma = rng.gen_range(-config.gamma_jitter..=config.gamma_jitter).exp();
    let sigma = rng.gen_range(0.0..=config.noise_jitter);
    let mut out = image.clone();
    if sigma > 0.0 {
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v += sigma * rng.sample::<f64, _>(StandardNormal));
    }
    adjust_gamma(&out, gamma)
}

/// Weighted loss and accuracy of `model` on `indices`.
pub fn validation_metrics(
    model: &DualEncoderModel,
    prompts: &ClassPromptSet,
    weights: &ClassWeights,
    data: Dataset<'_>,
    indices: &[usize],
) -> Result<(f64, f64, Vec<Vec<f64>>)> {
    let images: Vec<Grid> = indices.iter().map(|&i| data.images[i].clone()).collect();
    let labels: Vec<usize> = indices.iter().map(|&i| data.labels[i]).collect();
    let sims = model.similarity_matrix(&images, &prompts.tokenized())?;
    let loss = loss_value(&sims.scaled(), &labels, weights)?;
    let z = classify_similarities(&sims);
    let correct = z.labels.iter().zip(&labels).filter(|(p, t)| p == t).count();
    Ok((loss, correct as f64 / labels.len() as f64, z.scores))
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    /// Parameters (rounded to `f32`) from the lowest validation-loss epoch.
    pub best: DualEncoderModel,
    pub best_epoch: usize,
    pub log: TrainLog,
}

/// Train from `init` on `train`, selecting the epoch with the lowest
/// validation loss. With `checkpoint` set, the best model is saved there
/// each time it improves.
pub fn train_fold(
    init: &DualEncoderModel,
    data: Dataset<'_>,
    train: &[usize],
    val: &[usize],
    prompts: &ClassPromptSet,
    weights: &ClassWeights,
    config: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<FoldOutcome> {
    config.validate()?;
    data.check(train, "training")?;
    data.check(val, "validation")?;
    if config.batch_size > train.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} training images",
            config.batch_size,
            train.len()
        )));
    }
    init.config().text.covers(prompts)?;

    let mut model = init.clone();
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, &model);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, DualEncoderModel)> = None;
    let mut order = train.to_vec();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        opt.set_learning_rate(config.schedule.rate(config.learning_rate, epoch, config.epochs));
        order.copy_from_slice(train);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64)));
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let (loss, grads) = if config.gamma_jitter > 0.0 || config.noise_jitter > 0.0 {
                let images: Vec<Grid> = batch.par_iter().map(|&i| augment(&data.images[i], config, epoch, i)).collect();
                let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
                let local: Vec<usize> = (0..batch.len()).collect();
                batch_gradient(&model, prompts, weights, Dataset::new(&images, &labels)?, &local)?
            } else {
                batch_gradient(&model, prompts, weights, data, batch)?
            };
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite loss or gradient at epoch {epoch}, batch {b} (loss {loss})"
                )));
            }
            loss_sum += loss * batch.len() as f64;
            opt.step(&mut model, &grads);
            if model.log_temperature() > MAX_LOG_TEMPERATURE {
                model.set_log_temperature(MAX_LOG_TEMPERATURE);
            }
        }
        if !model.all_finite() {
            return Err(Error::Numerical(format!("parameters diverged at epoch {epoch}")));
        }
        let (val_loss, val_accuracy, _) = validation_metrics(&model, prompts, weights, data, val)?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation loss at epoch {epoch}")));
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().map_or(true, |b| val_loss < b.0) {
            let rounded = model.round_to_f32();
            if let Some(path) = checkpoint {
                let mut ck = Checkpoint::new(rounded.clone(), prompts.clone());
                ck.metadata.insert("epoch".into(), epoch.to_string());
                ck.metadata.insert("seed".into(), config.seed.to_string());
                ck.save(path)?;
            }
            best = Some((val_loss, epoch, rounded));
        } else if let (Some(p), Some(b)) = (config.patience, &best) {
            if epoch - b.1 >= p {
                break;
            }
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(FoldOutcome { best, best_epoch, log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    fn of(values: &[f64]) -> Self {
        let (mean, sd) = mean_sd(values);
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub best_epoch: usize,
    pub train_images: usize,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub folds: Vec<FoldSummary>,
    pub accuracy: MeanSd,
    /// Per-class one-vs-rest AUC across folds, classes A to D.
    pub per_class_auc: Vec<MeanSd>,
    pub per_class_accuracy: Vec<MeanSd>,
}

impl AggregateReport {
    pub fn new(folds: Vec<FoldSummary>) -> Self {
        let acc: Vec<f64> = folds.iter().map(|f| f.report.summary.overall_accuracy).collect();
        let per_class = |get: &dyn Fn(&EvaluationReport, usize) -> Option<f64>| {
            (0..Density::COUNT)
                .map(|c| {
                    let v: Vec<f64> = folds.iter().filter_map(|f| get(&f.report, c)).collect();
                    MeanSd::of(&v)
                })
                .collect()
        };
        Self {
            accuracy: MeanSd::of(&acc),
            per_class_auc: per_class(&|r, c| r.per_class_auc[c]),
            per_class_accuracy: per_class(&|r, c| r.summary.per_class_accuracy[c]),
            folds,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

pub struct CrossValidation {
    pub outcomes: Vec<FoldOutcome>,
    pub aggregate: AggregateReport,
}

/// Train one model per fold from the same initialization. With
/// `out_dir`, writes `fold{i}.ckpt`, `fold{i}.log.jsonl` and
/// `aggregate.json` there.
pub fn cross_validate(
    manifest: &Manifest,
    data: Dataset<'_>,
    folds: &FoldAssignment,
    init: &DualEncoderModel,
    prompts: &ClassPromptSet,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<CrossValidation> {
    if manifest.len() != data.images.len() {
        return Err(Error::Data(format!(
            "manifest has {} records but {} images were supplied",
            manifest.len(),
            data.images.len()
        )));
    }
    folds.audit(manifest)?;
    let mut outcomes = Vec::with_capacity(folds.k);
    let mut summaries = Vec::with_capacity(folds.k);
    for f in 0..folds.k {
        let (train, val) = folds.indices(manifest, f)?;
        let weights = ClassWeights::from_manifest(&manifest.select(&train))?;
        let ckpt = out_dir.map(|d| d.join(format!("fold{f}.ckpt")));
        let outcome = train_fold(init, data, &train, &val, prompts, &weights, config, ckpt.as_deref())?;
        let images: Vec<Grid> = val.iter().map(|&i| data.images[i].clone()).collect();
        let labels: Vec<usize> = val.iter().map(|&i| data.labels[i]).collect();
        let report = EvaluationReport::evaluate(&outcome.best, &images, &labels, prompts, &format!("fold{f}"))?;
        if let Some(d) = out_dir {
            write_atomic(&d.join(format!("fold{f}.log.jsonl")), outcome.log.to_jsonl().as_bytes())?;
        }
        summaries.push(FoldSummary {
            fold: f,
            best_epoch: outcome.best_epoch,
            train_images: train.len(),
            report,
        });
        outcomes.push(outcome);
    }
    let aggregate = AggregateReport::new(summaries);
    if let Some(d) = out_dir {
        write_atomic(&d.join("aggregate.json"), aggregate.to_json().as_bytes())?;
    }
    Ok(CrossValidation { outcomes, aggregate })
}
