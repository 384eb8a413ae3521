//! Mini-batch SGD with momentum, weight decay and a step schedule over the
//! combined class + aspect (+ distillation) objective.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::{AnnotateError, AnnotationStore, TeacherLogits};
use crate::aspects::sha256_hex;
use crate::data::{DataError, Dataset, Split, SplitView};
use crate::evalreport::{accuracy, EvalError};
use crate::losses::{objective, AspectLoss, BatchTargets, LossError, ObjectiveWeights};
use crate::model::{Model, ModelError};
use crate::numerics::{sigmoid, NumericsError, Record, Tensor};
use crate::seed;

/// Reference run length and milestones; shorter runs scale them.
pub const REFERENCE_EPOCHS: usize = 240;
pub const REFERENCE_MILESTONES: [usize; 3] = [150, 180, 210];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("epoch {epoch} outside 0..{epochs}")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("model has {model} aspect outputs but the targets have {targets}")]
    AspectCount { model: usize, targets: usize },
    #[error("alpha > 0 needs aspect targets")]
    MissingTargets,
    #[error("no aspect targets for image {0}")]
    MissingImage(String),
    #[error("teacher has {teacher} classes, model has {model}")]
    TeacherWidth { teacher: usize, model: usize },
    #[error("distillation needs a kd section in the training config")]
    KdNotConfigured,
    #[error("non-finite loss at epoch {epoch}, batch {batch}: ce={ce} makd={makd:?} kd={kd:?} total={total}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        ce: f64,
        makd: Option<f64>,
        kd: Option<f64>,
        total: f64,
    },
    #[error("parameters became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteParameters { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSource {
    #[default]
    Oracle,
    Endpoint,
    Random,
}

impl fmt::Display for TargetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetSource::Oracle => "oracle",
            TargetSource::Endpoint => "endpoint",
            TargetSource::Random => "random",
        })
    }
}

impl std::str::FromStr for TargetSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "endpoint" => Ok(Self::Endpoint),
            "random" => Ok(Self::Random),
            other => Err(format!(
                "unknown target source '{other}' (expected oracle, endpoint or random)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdConfig {
    pub temperature: f64,
    pub weight: f64,
    pub teacher: TargetSource,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            temperature: 4.0,
            weight: 1.0,
            teacher: TargetSource::Oracle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub kd: Option<KdConfig>,
    pub seed: u64,
    pub loss_variant: AspectLoss,
    pub aspect_target_source: TargetSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: REFERENCE_EPOCHS,
            batch_size: 16,
            base_lr: 0.01,
            lr_milestones: REFERENCE_MILESTONES.to_vec(),
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            alpha: 1.0,
            kd: None,
            seed: 0,
            loss_variant: AspectLoss::Bce,
            aspect_target_source: TargetSource::Oracle,
        }
    }
}

/// Reference milestones rescaled to a run of `epochs`. Milestones that
/// collide after rounding, or land outside the run, are dropped.
pub fn scaled_milestones(epochs: usize) -> Vec<usize> {
    let mut out: Vec<usize> = REFERENCE_MILESTONES
        .iter()
        .map(|&m| ((epochs * m) as f64 / REFERENCE_EPOCHS as f64).round() as usize)
        .filter(|&m| m > 0 && m < epochs)
        .collect();
    out.dedup();
    out
}

impl TrainConfig {
    /// Default recipe over `epochs` with proportionally placed milestones.
    pub fn with_epochs(epochs: usize) -> Self {
        Self {
            epochs,
            lr_milestones: scaled_milestones(epochs),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones {:?} must increase strictly", self.lr_milestones));
        }
        if self.lr_milestones.iter().any(|&m| m >= self.epochs) {
            return bad(format!(
                "milestones {:?} must be below epochs {}",
                self.lr_milestones, self.epochs
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad(format!("lr_decay {} outside (0, 1)", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha {} must be >= 0", self.alpha));
        }
        if let Some(kd) = &self.kd {
            if !(kd.temperature > 0.0 && kd.temperature.is_finite()) {
                return bad(format!("kd temperature {} must be positive", kd.temperature));
            }
            if !(kd.weight >= 0.0 && kd.weight.is_finite()) {
                return bad(format!("kd weight {} must be >= 0", kd.weight));
            }
            if kd.teacher == TargetSource::Random {
                return bad("kd teacher must be oracle or endpoint".into());
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serialises").as_bytes())
    }

    fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            alpha: self.alpha,
            variant: self.loss_variant,
            kd: self.kd.map(|k| (k.temperature, k.weight)),
        }
    }
}

/// `base_lr * decay^(milestones <= epoch)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(TrainError::EpochOutOfRange {
            epoch,
            epochs: config.epochs,
        });
    }
    let passed = config.lr_milestones.iter().filter(|&&m| m <= epoch).count();
    Ok(config.base_lr * config.lr_decay.powi(passed as i32))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub makd: Option<f64>,
    pub kd: Option<f64>,
    pub total: f64,
    pub test_acc: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_digest: String,
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: Option<String>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl RunRecord {
    pub const TSV_HEADER: &'static str = "epoch\tlr\tce\tmakd\ttotal\ttest_acc";

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_acc)
    }

    /// Tab-separated per-epoch table. Timing is left out so the table is a
    /// pure function of the inputs.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{}\n", Self::TSV_HEADER);
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.epoch,
                e.lr,
                e.ce,
                opt(e.makd),
                e.total,
                e.test_acc
            ));
        }
        out
    }
}

/// Momentum SGD; decay applies to weight matrices only.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &Model, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: model.parameters().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// `v = m v + (g + wd p)`, `p -= lr v`.
    pub fn step(&mut self, model: &mut Model, grads: &[Tensor], lr: f64) {
        for ((p, g), v) in model.parameters_mut().zip(grads).zip(&mut self.velocity) {
            let decay = if p.shape().len() == 2 { self.weight_decay } else { 0.0 };
            for ((pi, gi), vi) in p.values_mut().iter_mut().zip(g.values()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + (gi + decay * *pi);
                *pi -= lr * *vi;
            }
        }
    }
}

/// Loss terms of one batch and the gradient of `total` per parameter.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub ce: f64,
    pub makd: Option<f64>,
    pub kd: Option<f64>,
    pub total: f64,
    pub grads: Vec<Tensor>,
}

pub fn batch_loss(
    model: &Model,
    x: &Tensor,
    targets: BatchTargets<'_>,
    weights: ObjectiveWeights,
) -> Result<BatchLoss> {
    let mut rec = Record::new();
    let xi = rec.input(x.shape());
    let (_, logits) = model.emit(&mut rec, xi)?;
    let nodes = objective(&mut rec, logits, model.num_classes(), targets, weights)?;
    let mut inputs = Vec::with_capacity(1 + model.layers().len() * 2);
    inputs.push(x.clone());
    inputs.extend(model.parameters().cloned());
    rec.evaluate(&inputs)?;
    let mut grads = rec.backward(nodes.total, None)?;
    grads.remove(0);
    Ok(BatchLoss {
        ce: rec.scalar_value(nodes.ce)?,
        makd: nodes.makd.map(|n| rec.scalar_value(n)).transpose()?,
        kd: nodes.kd.map(|n| rec.scalar_value(n)).transpose()?,
        total: rec.scalar_value(nodes.total)?,
        grads,
    })
}

/// Row-major `rows x q` targets `sigmoid(N(0, 1))`, drawn once from the
/// random-target stream of `seed_value`.
pub fn random_targets(rows: usize, q: usize, seed_value: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed_value, &[seed::STREAM_RANDOM_TARGETS]);
    (0..rows * q)
        .map(|_| sigmoid(StandardNormal.sample(&mut rng)))
        .collect()
}

fn store_targets(store: &AnnotationStore, dataset: &Dataset, view: &SplitView) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(view.rows.len() * store.num_questions());
    for &r in &view.rows {
        let id = &dataset.manifest.images[r].id;
        let row = store.row_of(id).ok_or_else(|| TrainError::MissingImage(id.clone()))?;
        for col in 0..store.num_questions() {
            out.push(
                store
                    .get(row, col)
                    .ok_or_else(|| TrainError::MissingImage(id.clone()))?,
            );
        }
    }
    Ok(out)
}

fn teacher_rows(teacher: &TeacherLogits, dataset: &Dataset, view: &SplitView, c: usize) -> Result<Vec<f64>> {
    if teacher.num_classes != c {
        return Err(TrainError::TeacherWidth {
            teacher: teacher.num_classes,
            model: c,
        });
    }
    let mut out = Vec::with_capacity(view.rows.len() * c);
    for &r in &view.rows {
        let id = &dataset.manifest.images[r].id;
        let row = teacher.get(id).ok_or_else(|| TrainError::MissingImage(id.clone()))?;
        if row.len() != c {
            return Err(TrainError::TeacherWidth {
                teacher: row.len(),
                model: c,
            });
        }
        out.extend_from_slice(row);
    }
    Ok(out)
}

fn gather(values: &[f64], width: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        out.extend_from_slice(&values[i * width..(i + 1) * width]);
    }
    out
}

/// The training loop proper. `aspects` is `N x Q` and `teacher` is `N x C`,
/// both aligned with the train split.
fn fit(
    mut model: Model,
    dataset: &Dataset,
    aspects: Option<Vec<f64>>,
    teacher: Option<Vec<f64>>,
    config: &TrainConfig,
) -> Result<(Model, RunRecord)> {
    config.validate()?;
    let train = dataset.view(Split::Train)?;
    let test = dataset.view(Split::Test)?;
    let q = model.num_aspects();
    if let Some(a) = &aspects {
        if a.len() != train.rows.len() * q {
            return Err(TrainError::AspectCount {
                model: q,
                targets: a.len() / train.rows.len().max(1),
            });
        }
    } else if config.alpha > 0.0 && q > 0 {
        return Err(TrainError::MissingTargets);
    }
    let c = model.num_classes();
    let d = train.features.cols();
    let weights = config.weights();
    let mut sgd = Sgd::new(&model, config.momentum, config.weight_decay);
    let mut record = RunRecord {
        config_digest: config.digest(),
        epochs: Vec::with_capacity(config.epochs),
        checkpoint: None,
    };
    let n = train.rows.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, config)?;
        order.sort_unstable();
        order.shuffle(&mut seed::rng(config.seed, &[seed::STREAM_SHUFFLE, epoch as u64]));
        let (mut ce, mut makd, mut kd, mut total) = (0.0, 0.0, 0.0, 0.0);
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let x = Tensor::matrix(idx.len(), d, gather(train.features.values(), d, idx))?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let a = aspects.as_ref().map(|a| gather(a, q, idx));
            let t = teacher.as_ref().map(|t| gather(t, c, idx));
            let out = batch_loss(
                &model,
                &x,
                BatchTargets {
                    labels: &labels,
                    aspects: a.as_deref(),
                    teacher: t.as_deref(),
                },
                weights,
            )?;
            let finite = [Some(out.ce), out.makd, out.kd, Some(out.total)]
                .iter()
                .flatten()
                .all(|v| v.is_finite());
            if !finite {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch,
                    ce: out.ce,
                    makd: out.makd,
                    kd: out.kd,
                    total: out.total,
                });
            }
            sgd.step(&mut model, &out.grads, lr);
            if !model.all_finite() {
                return Err(TrainError::NonFiniteParameters { epoch, batch });
            }
            let w = idx.len() as f64;
            ce += w * out.ce;
            makd += w * out.makd.unwrap_or(0.0);
            kd += w * out.kd.unwrap_or(0.0);
            total += w * out.total;
        }
        let nf = n as f64;
        record.epochs.push(EpochRecord {
            epoch,
            lr,
            ce: ce / nf,
            makd: aspects.as_ref().filter(|_| q > 0).map(|_| makd / nf),
            kd: teacher.as_ref().map(|_| kd / nf),
            total: total / nf,
            test_acc: accuracy(&model, &test)?,
            wall_secs: started.elapsed().as_secs_f64(),
        });
    }
    Ok((model, record))
}

fn check_store(model: &Model, store: &AnnotationStore) -> Result<()> {
    if store.num_questions() != model.num_aspects() {
        return Err(TrainError::AspectCount {
            model: model.num_aspects(),
            targets: store.num_questions(),
        });
    }
    Ok(())
}

/// Trains on `ce + alpha * aspect loss`. With `Q = 0` the store may be absent.
pub fn train(
    model: Model,
    dataset: &Dataset,
    store: Option<&AnnotationStore>,
    config: &TrainConfig,
) -> Result<(Model, RunRecord)> {
    let train = dataset.view(Split::Train)?;
    let aspects = match store {
        Some(s) if model.num_aspects() > 0 => {
            check_store(&model, s)?;
            Some(store_targets(s, dataset, &train)?)
        }
        Some(s) => {
            check_store(&model, s)?;
            None
        }
        None => None,
    };
    fit(model, dataset, aspects, None, config)
}

/// As [`train`], with targets `sigmoid(N(0, 1))` drawn once per
/// (image, question) before the first epoch.
pub fn train_with_random_targets(model: Model, dataset: &Dataset, config: &TrainConfig) -> Result<(Model, RunRecord)> {
    let rows = dataset.rows_in(Split::Train).len();
    let aspects = (model.num_aspects() > 0).then(|| random_targets(rows, model.num_aspects(), config.seed));
    fit(model, dataset, aspects, None, config)
}

/// As [`train`], plus `kd.weight * T^2 KL` against per-image teacher logits.
pub fn train_with_kd(
    model: Model,
    dataset: &Dataset,
    teacher: &TeacherLogits,
    store: Option<&AnnotationStore>,
    config: &TrainConfig,
) -> Result<(Model, RunRecord)> {
    if config.kd.is_none() {
        return Err(TrainError::KdNotConfigured);
    }
    let train = dataset.view(Split::Train)?;
    let t = teacher_rows(teacher, dataset, &train, model.num_classes())?;
    let aspects = match store {
        Some(s) if model.num_aspects() > 0 => {
            check_store(&model, s)?;
            Some(store_targets(s, dataset, &train)?)
        }
        _ => None,
    };
    fit(model, dataset, aspects, Some(t), config)
}
