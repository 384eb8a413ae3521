//! Metrics, figure-data exports and the seeded ablation harness.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::{
    oracle_annotate, oracle_class_logits, AnnotateError, AnnotationStore, OracleSettings, OracleSpec,
};
use crate::aspects::{sha256_hex, AspectError, OfflineGenerator, QuestionSet};
use crate::data::{
    generate_synthetic, subsample_train, DataError, Dataset, DatasetManifest, Split, SplitView, SyntheticConfig,
};
use crate::losses::AspectLoss;
use crate::model::{Model, ModelConfig, ModelError};
use crate::numerics::sigmoid;
use crate::train::{
    train, train_with_kd, train_with_random_targets, KdConfig, RunRecord, TargetSource, TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("split has no samples")]
    EmptySplit,
    #[error("store is incomplete")]
    IncompleteStore,
    #[error("model has {model} aspect outputs, store has {store} questions")]
    AspectMismatch { model: usize, store: usize },
    #[error("image {0} has no stored targets")]
    MissingImage(String),
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("export: {0}")]
    Export(String),
    #[error("{failed} of {total} runs failed")]
    RunsFailed { failed: usize, total: usize },
    #[error(transparent)]
    Train(Box<TrainError>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    Aspects(#[from] AspectError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        EvalError::Train(Box::new(e))
    }
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Percentage of rows whose class-slice argmax equals the label.
pub fn accuracy(model: &Model, split: &SplitView) -> Result<f64> {
    if split.labels.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let outputs = model.predict(&split.features)?;
    let hits = outputs
        .iter()
        .zip(&split.labels)
        .filter(|(o, &l)| o.predicted_class() == l)
        .count();
    Ok(100.0 * hits as f64 / split.labels.len() as f64)
}

/// `C x Q` mean target per class; classes without annotated images get NaN.
pub fn aspect_mean_by_class(store: &AnnotationStore, manifest: &DatasetManifest) -> Result<Vec<Vec<f64>>> {
    if !store.is_complete() {
        return Err(EvalError::IncompleteStore);
    }
    let (c, q) = (manifest.num_classes(), store.num_questions());
    let mut sums = vec![vec![0.0; q]; c];
    let mut counts = vec![0usize; c];
    for img in &manifest.images {
        let Some(row) = store.row_of(&img.id) else { continue };
        counts[img.label] += 1;
        for (s, v) in sums[img.label].iter_mut().zip(store.row(row)) {
            *s += v;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectFidelity {
    /// Mean `|sigmoid(aspect logit) - q|` per question.
    pub per_question: Vec<f64>,
    pub overall: f64,
}

fn split_targets<'a>(store: &'a AnnotationStore, dataset: &'a Dataset, split: &SplitView) -> Result<Vec<&'a [f64]>> {
    split
        .rows
        .iter()
        .map(|&r| {
            let id = &dataset.manifest.images[r].id;
            let row = store.row_of(id).ok_or_else(|| EvalError::MissingImage(id.clone()))?;
            Ok(store.row(row))
        })
        .collect()
}

fn check_q(model: &Model, store: &AnnotationStore) -> Result<()> {
    if model.num_aspects() != store.num_questions() {
        return Err(EvalError::AspectMismatch {
            model: model.num_aspects(),
            store: store.num_questions(),
        });
    }
    if !store.is_complete() {
        return Err(EvalError::IncompleteStore);
    }
    Ok(())
}

pub fn compare_model_vs_store(
    model: &Model,
    store: &AnnotationStore,
    dataset: &Dataset,
    split: Split,
) -> Result<AspectFidelity> {
    check_q(model, store)?;
    let view = dataset.view(split)?;
    let targets = split_targets(store, dataset, &view)?;
    let outputs = model.predict(&view.features)?;
    let q = store.num_questions();
    let mut per_question = vec![0.0; q];
    for (out, t) in outputs.iter().zip(&targets) {
        for ((acc, p), q) in per_question.iter_mut().zip(out.aspect_probabilities()).zip(t.iter()) {
            *acc += (p - q).abs();
        }
    }
    let n = view.rows.len() as f64;
    for v in &mut per_question {
        *v /= n;
    }
    let overall = if q == 0 {
        0.0
    } else {
        per_question.iter().sum::<f64>() / q as f64
    };
    Ok(AspectFidelity { per_question, overall })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectExportRow {
    pub image_id: String,
    pub question_id: u32,
    pub model_probability: f64,
    pub store_q: f64,
}

/// Image-major rows of model aspect probabilities beside the stored targets.
pub fn export_aspect_logits(
    model: &Model,
    store: &AnnotationStore,
    dataset: &Dataset,
    split: Split,
) -> Result<Vec<AspectExportRow>> {
    check_q(model, store)?;
    let view = dataset.view(split)?;
    let targets = split_targets(store, dataset, &view)?;
    let logits = model.logits(&view.features)?;
    let c = model.num_classes();
    let mut rows = Vec::with_capacity(view.rows.len() * store.num_questions());
    for (i, (&r, t)) in view.rows.iter().zip(&targets).enumerate() {
        for (j, (&qid, &q)) in store.question_ids.iter().zip(t.iter()).enumerate() {
            rows.push(AspectExportRow {
                image_id: dataset.manifest.images[r].id.clone(),
                question_id: qid,
                model_probability: sigmoid(logits.row(i)[c + j]),
                store_q: q,
            });
        }
    }
    Ok(rows)
}

pub fn write_export(rows: &[AspectExportRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| EvalError::Export(e.to_string()))?;
    }
    if rows.is_empty() {
        w.write_record(["image_id", "question_id", "model_probability", "store_q"])
            .map_err(|e| EvalError::Export(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Export(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| EvalError::Export(e.to_string()))
}

pub fn parse_export(text: &str) -> Result<Vec<AspectExportRow>> {
    csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| EvalError::Export(e.to_string())))
        .collect()
}

/// Where a plan's datasets and aspect targets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Benchmark {
    pub synthetic: SyntheticConfig,
    pub oracle: OracleSettings,
    /// Candidate questions generated before the top-Q selection.
    pub candidates: usize,
    pub hidden_dims: Vec<usize>,
    pub teacher_scale: f64,
    pub teacher_noise: f64,
}

impl Default for Benchmark {
    fn default() -> Self {
        Self {
            synthetic: SyntheticConfig::default(),
            oracle: OracleSettings::default(),
            candidates: 100,
            hidden_dims: vec![128, 64],
            teacher_scale: 6.0,
            teacher_noise: 0.5,
        }
    }
}

impl Benchmark {
    pub fn id(&self) -> String {
        let s = &self.synthetic;
        format!(
            "synthetic-c{}-k{}-d{}-{}",
            s.num_classes,
            s.num_attributes,
            s.feature_dim,
            &sha256_hex(serde_json::to_string(self).expect("serialises").as_bytes())[..12]
        )
    }

    /// Dataset, oracle store and question set for replicate `seed`. Data,
    /// oracle noise, initialisation and shuffling all derive from `seed`.
    pub fn materialise(&self, seed: u64, q: usize) -> Result<(Dataset, QuestionSet, AnnotationStore)> {
        let (dataset, _) = generate_synthetic(&SyntheticConfig {
            seed,
            ..self.synthetic.clone()
        })?;
        let m = &dataset.manifest;
        let all = OfflineGenerator.generate(&m.dataset_id, &m.class_names, m.num_images(), self.candidates.max(q))?;
        let questions = all.select_top(q)?;
        let names = m.attribute_names.clone().unwrap_or_default();
        let spec = OracleSpec::for_questions(&questions, &names, &self.oracle, seed);
        let store = oracle_annotate(m, &questions, &spec)?;
        Ok((dataset, questions, store))
    }
}

/// One point of the experiment grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellSpec {
    pub alpha: f64,
    pub q: usize,
    pub fraction: f64,
    pub loss_variant: AspectLoss,
    pub target_source: TargetSource,
    /// Weight of the distillation term; 0 turns it off.
    pub kd: f64,
}

impl Default for CellSpec {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            q: 10,
            fraction: 1.0,
            loss_variant: AspectLoss::Bce,
            target_source: TargetSource::Oracle,
            kd: 0.0,
        }
    }
}

impl CellSpec {
    /// The cell differing only in having no aspect term.
    pub fn baseline(&self) -> Self {
        Self {
            alpha: 0.0,
            q: 0,
            loss_variant: AspectLoss::Bce,
            target_source: TargetSource::Oracle,
            ..self.clone()
        }
    }

    pub fn is_baseline(&self) -> bool {
        *self == self.baseline()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Axis {
    Alpha(Vec<f64>),
    Q(Vec<usize>),
    Fraction(Vec<f64>),
    LossVariant(Vec<AspectLoss>),
    TargetSource(Vec<TargetSource>),
    Kd(Vec<f64>),
}

fn parse_list<T: std::str::FromStr>(values: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<T>().map_err(|e| format!("'{v}': {e}")))
        .collect()
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::Alpha(_) => "alpha",
            Axis::Q(_) => "q",
            Axis::Fraction(_) => "fraction",
            Axis::LossVariant(_) => "loss_variant",
            Axis::TargetSource(_) => "target_source",
            Axis::Kd(_) => "kd",
        }
    }

    fn len(&self) -> usize {
        match self {
            Axis::Alpha(v) | Axis::Fraction(v) | Axis::Kd(v) => v.len(),
            Axis::Q(v) => v.len(),
            Axis::LossVariant(v) => v.len(),
            Axis::TargetSource(v) => v.len(),
        }
    }

    fn apply(&self, i: usize, cell: &mut CellSpec) {
        match self {
            Axis::Alpha(v) => cell.alpha = v[i],
            Axis::Q(v) => cell.q = v[i],
            Axis::Fraction(v) => cell.fraction = v[i],
            Axis::LossVariant(v) => cell.loss_variant = v[i],
            Axis::TargetSource(v) => cell.target_source = v[i],
            Axis::Kd(v) => cell.kd = v[i],
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = String;

    /// `name=v1,v2,...`
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (name, values) = s
            .split_once('=')
            .ok_or_else(|| format!("axis '{s}' is not name=v1,v2,..."))?;
        let axis = match name.trim().to_lowercase().as_str() {
            "alpha" => Axis::Alpha(parse_list(values)?),
            "q" => Axis::Q(parse_list(values)?),
            "fraction" => Axis::Fraction(parse_list(values)?),
            "loss_variant" | "loss" => Axis::LossVariant(parse_list(values)?),
            "target_source" | "targets" => Axis::TargetSource(parse_list(values)?),
            "kd" => Axis::Kd(parse_list(values)?),
            other => return Err(format!("unknown axis '{other}'")),
        };
        if axis.len() == 0 {
            return Err(format!("axis '{name}' has no values"));
        }
        Ok(axis)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    pub benchmark: Benchmark,
    pub train: TrainConfig,
    /// Values of every axis not swept.
    pub defaults: CellSpec,
    pub axes: Vec<Axis>,
    pub seeds: Vec<u64>,
    /// Adds the matched no-aspect cell of every swept cell.
    pub baselines: bool,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            benchmark: Benchmark::default(),
            train: TrainConfig::with_epochs(60),
            defaults: CellSpec::default(),
            axes: Vec::new(),
            seeds: vec![0, 1, 2],
            baselines: true,
            output_dir: None,
        }
    }
}

fn cell_digest(plan: &ExperimentPlan, cell: &CellSpec) -> String {
    let key = serde_json::json!({
        "benchmark": plan.benchmark,
        "train": plan.train,
        "cell": cell,
    });
    sha256_hex(key.to_string().as_bytes())
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(EvalError::Plan("no seeds".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for a in &self.axes {
            if !seen.insert(a.name()) {
                return Err(EvalError::Plan(format!("axis {} given twice", a.name())));
            }
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(EvalError::Plan("duplicate seeds".into()));
        }
        self.train.validate()?;
        Ok(())
    }

    /// Cartesian product of the axes, in axis order.
    pub fn grid(&self) -> Vec<CellSpec> {
        let mut cells = vec![self.defaults.clone()];
        for axis in &self.axes {
            cells = cells
                .iter()
                .flat_map(|c| {
                    (0..axis.len()).map(move |i| {
                        let mut c = c.clone();
                        axis.apply(i, &mut c);
                        c
                    })
                })
                .collect();
        }
        cells
    }

    /// Grid cells plus matched baselines, unique by digest, sorted by digest.
    pub fn cells(&self) -> Vec<(String, CellSpec)> {
        let mut out: BTreeMap<String, CellSpec> = BTreeMap::new();
        for c in self.grid() {
            if self.baselines {
                let b = c.baseline();
                out.insert(cell_digest(self, &b), b);
            }
            out.insert(cell_digest(self, &c), c);
        }
        out.into_iter().collect()
    }
}

/// Outcome of one (cell, seed) run.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub accuracy: f64,
    pub fidelity_before: Option<f64>,
    pub fidelity_after: Option<f64>,
    pub record: RunRecord,
    pub model: Model,
}

/// Trains and evaluates one cell for one replicate seed.
pub fn run_cell(benchmark: &Benchmark, base: &TrainConfig, cell: &CellSpec, seed: u64) -> Result<CellRun> {
    let (full, _questions, store) = benchmark.materialise(seed, cell.q)?;
    let dataset = subsample_train(&full, cell.fraction, seed)?;
    let model = Model::build(ModelConfig {
        hidden_dims: benchmark.hidden_dims.clone(),
        ..ModelConfig::new(dataset.feature_dim(), dataset.num_classes(), cell.q, seed)
    })?;
    let config = TrainConfig {
        alpha: cell.alpha,
        loss_variant: cell.loss_variant,
        aspect_target_source: cell.target_source,
        seed,
        kd: (cell.kd > 0.0).then(|| KdConfig {
            weight: cell.kd,
            ..base.kd.unwrap_or_default()
        }),
        ..base.clone()
    };
    let fidelity = |m: &Model| -> Result<Option<f64>> {
        if cell.q == 0 {
            return Ok(None);
        }
        Ok(Some(compare_model_vs_store(m, &store, &dataset, Split::Test)?.overall))
    };
    let fidelity_before = fidelity(&model)?;
    let (model, record) = match (cell.target_source, config.kd) {
        (TargetSource::Endpoint, _) => {
            return Err(EvalError::Plan(
                "endpoint targets are not available on the synthetic benchmark".into(),
            ))
        }
        (TargetSource::Random, None) => train_with_random_targets(model, &dataset, &config)?,
        (TargetSource::Random, Some(_)) => {
            return Err(EvalError::Plan("random targets cannot be combined with kd".into()))
        }
        (TargetSource::Oracle, Some(_)) => {
            let teacher = oracle_class_logits(
                &dataset.manifest,
                benchmark.teacher_scale,
                benchmark.teacher_noise,
                seed,
            )?;
            train_with_kd(model, &dataset, &teacher, Some(&store), &config)?
        }
        (TargetSource::Oracle, None) => train(model, &dataset, Some(&store), &config)?,
    };
    Ok(CellRun {
        accuracy: record.final_accuracy().unwrap_or(0.0),
        fidelity_before,
        fidelity_after: fidelity(&model)?,
        record,
        model,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub digest: String,
    pub seed: u64,
    pub cell: CellSpec,
    pub accuracy: Option<f64>,
    pub fidelity_before: Option<f64>,
    pub fidelity_after: Option<f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub record: Option<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub digest: String,
    pub cell: CellSpec,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
    pub base_digest: Option<String>,
    pub base_mean: Option<f64>,
    pub gap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PlanReport {
    pub rows: Vec<ComparisonRow>,
    pub runs: Vec<RunSummary>,
}

impl PlanReport {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn row(&self, cell: &CellSpec) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| &r.cell == cell)
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every (cell, seed) pair, in parallel, and aggregates per cell.
/// Results do not depend on scheduling: runs are independent and collected
/// in digest-then-seed order.
pub fn run_plan(plan: &ExperimentPlan) -> Result<PlanReport> {
    plan.validate()?;
    let cells = plan.cells();
    let jobs: Vec<(&String, &CellSpec, u64)> = cells
        .iter()
        .flat_map(|(d, c)| plan.seeds.iter().map(move |&s| (d, c, s)))
        .collect();
    let runs: Vec<RunSummary> = jobs
        .par_iter()
        .map(|&(digest, cell, seed)| {
            let mut summary = RunSummary {
                digest: digest.clone(),
                seed,
                cell: cell.clone(),
                accuracy: None,
                fidelity_before: None,
                fidelity_after: None,
                error: None,
                record: None,
            };
            match run_cell(&plan.benchmark, &plan.train, cell, seed) {
                Ok(run) => {
                    summary.accuracy = Some(run.accuracy);
                    summary.fidelity_before = run.fidelity_before;
                    summary.fidelity_after = run.fidelity_after;
                    summary.record = Some(run.record);
                }
                Err(e) => summary.error = Some(e.to_string()),
            }
            summary
        })
        .collect();

    let means: BTreeMap<&String, (f64, f64, usize)> = cells
        .iter()
        .map(|(d, _)| {
            let accs: Vec<f64> = runs
                .iter()
                .filter(|r| &r.digest == d)
                .filter_map(|r| r.accuracy)
                .collect();
            let (m, s) = mean_std(&accs);
            (d, (m, s, accs.len()))
        })
        .collect();
    let rows = cells
        .iter()
        .map(|(d, c)| {
            let (mean, std, n) = means[d];
            let base_digest = plan.baselines.then(|| cell_digest(plan, &c.baseline()));
            let base_mean = base_digest.as_ref().map(|b| means[b].0);
            ComparisonRow {
                digest: d.clone(),
                cell: c.clone(),
                runs: n,
                mean,
                std,
                gap: base_mean.map(|b| mean - b),
                base_mean,
                base_digest,
            }
        })
        .collect();
    let report = PlanReport { rows, runs };
    if let Some(dir) = &plan.output_dir {
        write_report(plan, &report, dir)?;
    }
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}

fn cell_columns(c: &CellSpec) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}",
        c.alpha, c.q, c.fraction, c.loss_variant, c.target_source, c.kd
    )
}

const CELL_HEADER: &str = "alpha\tq\tfraction\tloss_variant\ttarget_source\tkd";

fn short(d: &str) -> &str {
    &d[..16]
}

pub fn summary_tsv(report: &PlanReport) -> String {
    let mut out = format!("digest\t{CELL_HEADER}\truns\tmean_acc\tstd_acc\tbase_digest\tbase_acc\tgap\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            short(&r.digest),
            cell_columns(&r.cell),
            r.runs,
            r.mean,
            r.std,
            r.base_digest.as_deref().map_or("NA", short),
            fmt_opt(r.base_mean),
            fmt_opt(r.gap)
        ));
    }
    out
}

pub fn runs_tsv(report: &PlanReport) -> String {
    let mut out = format!("digest\tseed\t{CELL_HEADER}\taccuracy\tfidelity_before\tfidelity_after\tstatus\n");
    for r in &report.runs {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            short(&r.digest),
            r.seed,
            cell_columns(&r.cell),
            fmt_opt(r.accuracy),
            fmt_opt(r.fidelity_before),
            fmt_opt(r.fidelity_after),
            r.error
                .as_deref()
                .map_or("ok".to_string(), |e| e.replace(['\t', '\n'], " "))
        ));
    }
    out
}

fn sweep_tsv(report: &PlanReport, key: impl Fn(&CellSpec) -> (String, f64), name: &str) -> String {
    let mut rows: Vec<&ComparisonRow> = report
        .rows
        .iter()
        .filter(|r| !r.cell.is_baseline() || name == "q")
        .collect();
    rows.sort_by(|a, b| {
        let (ka, va) = key(&a.cell);
        let (kb, vb) = key(&b.cell);
        ka.cmp(&kb).then(va.total_cmp(&vb))
    });
    let mut out = format!("{CELL_HEADER}\tmean_acc\tstd_acc\tgap\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            cell_columns(&r.cell),
            r.mean,
            r.std,
            fmt_opt(r.gap)
        ));
    }
    out
}

/// Base / Ours / Gap per training fraction.
pub fn fraction_gap_tsv(report: &PlanReport) -> String {
    let mut rows: Vec<&ComparisonRow> = report
        .rows
        .iter()
        .filter(|r| !r.cell.is_baseline() && r.base_mean.is_some())
        .collect();
    rows.sort_by(|a, b| {
        let ka = cell_columns(&CellSpec {
            fraction: 0.0,
            ..a.cell.clone()
        });
        let kb = cell_columns(&CellSpec {
            fraction: 0.0,
            ..b.cell.clone()
        });
        ka.cmp(&kb).then(a.cell.fraction.total_cmp(&b.cell.fraction))
    });
    let mut out = String::from("fraction\talpha\tq\tbase\tours\tgap\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.cell.fraction,
            r.cell.alpha,
            r.cell.q,
            fmt_opt(r.base_mean),
            r.mean,
            fmt_opt(r.gap)
        ));
    }
    out
}

pub fn write_report(plan: &ExperimentPlan, report: &PlanReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("runs"))?;
    std::fs::write(dir.join("summary.tsv"), summary_tsv(report))?;
    std::fs::write(dir.join("runs.tsv"), runs_tsv(report))?;
    for r in &report.runs {
        if let Some(rec) = &r.record {
            std::fs::write(
                dir.join("runs").join(format!("{}-s{}.tsv", short(&r.digest), r.seed)),
                rec.to_tsv(),
            )?;
        }
    }
    let has = |name: &str| plan.axes.iter().any(|a| a.name() == name);
    if has("alpha") {
        let key = |c: &CellSpec| {
            (
                cell_columns(&CellSpec {
                    alpha: 0.0,
                    ..c.clone()
                }),
                c.alpha,
            )
        };
        std::fs::write(dir.join("alpha_sweep.tsv"), sweep_tsv(report, key, "alpha"))?;
    }
    if has("q") {
        let key = |c: &CellSpec| {
            (
                cell_columns(&CellSpec {
                    q: 0,
                    alpha: 0.0,
                    ..c.clone()
                }),
                c.q as f64,
            )
        };
        std::fs::write(dir.join("q_sweep.tsv"), sweep_tsv(report, key, "q"))?;
    }
    if has("fraction") {
        std::fs::write(dir.join("fraction_gap.tsv"), fraction_gap_tsv(report))?;
    }
    Ok(())
}
