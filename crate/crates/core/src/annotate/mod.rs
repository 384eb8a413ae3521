//! Per-image aspect targets: extraction from a vision-language endpoint, a
//! resumable on-disk store, and a synthetic oracle that stands in for the
//! endpoint on the synthetic benchmark.

pub mod endpoint;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Duration;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aspects::QuestionSet;
use crate::data::DatasetManifest;
use crate::losses::{yes_no_probability, LossError};
use crate::seed;
use endpoint::{
    aspect_request, build_class_query, extract_class_logits, extract_yes_no_logits, ChatEndpoint, EndpointError,
    ExtractError, ImageRef,
};

pub const STORE_FORMAT: &str = "makd-annotations";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("store was built for question set {found}, expected {expected}")]
    StaleStore { expected: String, found: String },
    #[error("store belongs to dataset {found}, expected {expected}")]
    WrongDataset { expected: String, found: String },
    #[error("store is incomplete: {missing} of {total} pairs missing")]
    Incomplete { missing: usize, total: usize },
    #[error("annotation halted with {} failed pairs; resumable store at {store}", failed.len())]
    Halted { store: PathBuf, failed: Vec<FailedPair> },
    #[error("oracle has {probes} probes for {questions} questions")]
    ProbeCount { probes: usize, questions: usize },
    #[error("invalid oracle spec: {0}")]
    Oracle(String),
    #[error("dataset has no latent attributes")]
    NoLatents,
    #[error("question {0} is not in the store")]
    UnknownQuestion(u32),
    #[error("image {0} is not in the store")]
    UnknownImage(String),
    #[error("store file: {0}")]
    Format(String),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Endpoint(#[from] EndpointError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("store io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AnnotateError>;

#[derive(Debug, Clone, PartialEq)]
pub struct FailedPair {
    pub image_id: String,
    pub question_id: u32,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AspectAnnotation {
    pub z_yes: f64,
    pub z_no: f64,
    pub q: f64,
    pub imputed: bool,
}

impl AspectAnnotation {
    pub fn from_logits(z_yes: f64, z_no: f64, imputed: bool) -> Result<Self> {
        Ok(Self {
            z_yes,
            z_no,
            q: yes_no_probability(z_yes, z_no)?,
            imputed,
        })
    }
}

/// Dense `M x Q` matrix of aspect targets with a completion bitmap.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationStore {
    pub dataset_id: String,
    pub question_digest: String,
    pub image_ids: Vec<String>,
    pub question_ids: Vec<u32>,
    q: Vec<f64>,
    z_yes: Option<Vec<f64>>,
    z_no: Option<Vec<f64>>,
    imputed: Vec<bool>,
    complete: Vec<bool>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct StoreFile {
    format: String,
    version: u32,
    dataset_id: String,
    question_digest: String,
    num_images: usize,
    num_questions: usize,
    image_ids: Vec<String>,
    question_ids: Vec<u32>,
    q: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    z_yes: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    z_no: Option<Vec<Vec<f64>>>,
    imputed: Vec<String>,
    complete: Vec<String>,
}

fn bits_to_rows(bits: &[bool], cols: usize) -> Vec<String> {
    if cols == 0 {
        return vec![String::new(); bits.len()];
    }
    bits.chunks(cols)
        .map(|row| row.iter().map(|&b| if b { '1' } else { '0' }).collect())
        .collect()
}

fn rows_to_bits(rows: &[String], cols: usize) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(rows.len() * cols);
    for row in rows {
        if row.len() != cols {
            return Err(AnnotateError::Format("bitmap row width mismatch".into()));
        }
        for c in row.chars() {
            out.push(match c {
                '1' => true,
                '0' => false,
                _ => return Err(AnnotateError::Format(format!("bad bitmap char {c:?}"))),
            });
        }
    }
    Ok(out)
}

fn to_rows(values: &[f64], cols: usize, rows: usize) -> Vec<Vec<f64>> {
    if cols == 0 {
        return vec![Vec::new(); rows];
    }
    values.chunks(cols).map(<[f64]>::to_vec).collect()
}

impl AnnotationStore {
    pub fn empty(dataset_id: &str, questions: &QuestionSet, image_ids: Vec<String>, with_logits: bool) -> Self {
        let qn = questions.num_selected();
        let n = image_ids.len() * qn;
        let index = image_ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Self {
            dataset_id: dataset_id.to_string(),
            question_digest: questions.digest(),
            image_ids,
            question_ids: questions.selected.clone(),
            q: vec![0.0; n],
            z_yes: with_logits.then(|| vec![0.0; n]),
            z_no: with_logits.then(|| vec![0.0; n]),
            imputed: vec![false; n],
            complete: vec![false; n],
            index,
        }
    }

    pub fn num_images(&self) -> usize {
        self.image_ids.len()
    }

    pub fn num_questions(&self) -> usize {
        self.question_ids.len()
    }

    pub fn row_of(&self, image_id: &str) -> Option<usize> {
        self.index.get(image_id).copied()
    }

    pub fn set(&mut self, row: usize, col: usize, a: AspectAnnotation) {
        let k = row * self.num_questions() + col;
        self.q[k] = a.q;
        if let (Some(y), Some(n)) = (&mut self.z_yes, &mut self.z_no) {
            y[k] = a.z_yes;
            n[k] = a.z_no;
        }
        self.imputed[k] = a.imputed;
        self.complete[k] = true;
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let k = row * self.num_questions() + col;
        self.complete[k].then(|| self.q[k])
    }

    pub fn logits(&self, row: usize, col: usize) -> Option<(f64, f64)> {
        let k = row * self.num_questions() + col;
        match (&self.z_yes, &self.z_no) {
            (Some(y), Some(n)) if self.complete[k] => Some((y[k], n[k])),
            _ => None,
        }
    }

    pub fn is_imputed(&self, row: usize, col: usize) -> bool {
        self.imputed[row * self.num_questions() + col]
    }

    /// Targets of one image, in question order.
    pub fn row(&self, row: usize) -> &[f64] {
        let q = self.num_questions();
        &self.q[row * q..(row + 1) * q]
    }

    pub fn targets_for(&self, image_id: &str) -> Result<&[f64]> {
        let r = self
            .row_of(image_id)
            .ok_or_else(|| AnnotateError::UnknownImage(image_id.to_string()))?;
        Ok(self.row(r))
    }

    pub fn num_complete(&self) -> usize {
        self.complete.iter().filter(|c| **c).count()
    }

    pub fn is_complete(&self) -> bool {
        self.complete.iter().all(|c| *c)
    }

    pub fn ensure_complete(&self) -> Result<()> {
        let missing = self.complete.len() - self.num_complete();
        if missing > 0 {
            return Err(AnnotateError::Incomplete {
                missing,
                total: self.complete.len(),
            });
        }
        Ok(())
    }

    /// `(row, col)` of every pair not yet annotated, image-major.
    pub fn pending(&self) -> Vec<(usize, usize)> {
        let q = self.num_questions();
        self.complete
            .iter()
            .enumerate()
            .filter(|(_, c)| !**c)
            .map(|(k, _)| (k / q, k % q))
            .collect()
    }

    /// Rejects a store built for another dataset or question selection.
    pub fn check_against(&self, dataset_id: &str, questions: &QuestionSet) -> Result<()> {
        if self.dataset_id != dataset_id {
            return Err(AnnotateError::WrongDataset {
                expected: dataset_id.to_string(),
                found: self.dataset_id.clone(),
            });
        }
        let digest = questions.digest();
        if self.question_digest != digest {
            return Err(AnnotateError::StaleStore {
                expected: digest,
                found: self.question_digest.clone(),
            });
        }
        Ok(())
    }

    /// Column subset for a narrower question selection (e.g. a top-k prefix).
    pub fn restrict_to(&self, questions: &QuestionSet) -> Result<Self> {
        let cols = questions
            .selected
            .iter()
            .map(|id| {
                self.question_ids
                    .iter()
                    .position(|q| q == id)
                    .ok_or(AnnotateError::UnknownQuestion(*id))
            })
            .collect::<Result<Vec<_>>>()?;
        let old_q = self.num_questions();
        let pick = |v: &[f64]| -> Vec<f64> {
            (0..self.num_images())
                .flat_map(|r| cols.iter().map(move |&c| v[r * old_q + c]))
                .collect()
        };
        let pick_bits = |v: &[bool]| -> Vec<bool> {
            (0..self.num_images())
                .flat_map(|r| cols.iter().map(move |&c| v[r * old_q + c]))
                .collect()
        };
        Ok(Self {
            dataset_id: self.dataset_id.clone(),
            question_digest: questions.digest(),
            image_ids: self.image_ids.clone(),
            question_ids: questions.selected.clone(),
            q: pick(&self.q),
            z_yes: self.z_yes.as_deref().map(pick),
            z_no: self.z_no.as_deref().map(pick),
            imputed: pick_bits(&self.imputed),
            complete: pick_bits(&self.complete),
            index: self.index.clone(),
        })
    }

    pub fn to_json(&self) -> String {
        let (m, q) = (self.num_images(), self.num_questions());
        let file = StoreFile {
            format: STORE_FORMAT.into(),
            version: STORE_VERSION,
            dataset_id: self.dataset_id.clone(),
            question_digest: self.question_digest.clone(),
            num_images: m,
            num_questions: q,
            image_ids: self.image_ids.clone(),
            question_ids: self.question_ids.clone(),
            q: to_rows(&self.q, q, m),
            z_yes: self.z_yes.as_deref().map(|v| to_rows(v, q, m)),
            z_no: self.z_no.as_deref().map(|v| to_rows(v, q, m)),
            imputed: bits_to_rows(&self.imputed, q),
            complete: bits_to_rows(&self.complete, q),
        };
        serde_json::to_string(&file).expect("store serialises") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: StoreFile = serde_json::from_str(text).map_err(|e| AnnotateError::Format(e.to_string()))?;
        if f.format != STORE_FORMAT {
            return Err(AnnotateError::Format("not an annotation store".into()));
        }
        if f.version != STORE_VERSION {
            return Err(AnnotateError::Format(format!("unsupported version {}", f.version)));
        }
        let (m, q) = (f.num_images, f.num_questions);
        if f.image_ids.len() != m || f.question_ids.len() != q || f.q.len() != m {
            return Err(AnnotateError::Format("header does not match body".into()));
        }
        let flat = |rows: Vec<Vec<f64>>| -> Result<Vec<f64>> {
            if rows.len() != m || rows.iter().any(|r| r.len() != q) {
                return Err(AnnotateError::Format("matrix shape mismatch".into()));
            }
            Ok(rows.into_iter().flatten().collect())
        };
        let values = flat(f.q)?;
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(AnnotateError::Format(format!("target {bad} outside [0, 1]")));
        }
        let index = f.image_ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Ok(Self {
            dataset_id: f.dataset_id,
            question_digest: f.question_digest,
            image_ids: f.image_ids,
            question_ids: f.question_ids,
            q: values,
            z_yes: f.z_yes.map(flat).transpose()?,
            z_no: f.z_no.map(flat).transpose()?,
            imputed: rows_to_bits(&f.imputed, q)?,
            complete: rows_to_bits(&f.complete, q)?,
            index,
        })
    }

    /// Writes through a temporary file and a rename so a crash never leaves a
    /// truncated store behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_json())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff_ms: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub max_concurrent: usize,
    pub retry: RetryPolicy,
    pub top_logprobs: u32,
    pub timeout_secs: u64,
    /// Completed pairs between store checkpoints.
    pub flush_every: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            api_key_env: None,
            max_concurrent: 4,
            retry: RetryPolicy::default(),
            top_logprobs: 5,
            timeout_secs: 60,
            flush_every: 32,
        }
    }
}

fn with_retry<T>(
    policy: &RetryPolicy,
    mut attempt: impl FnMut() -> std::result::Result<T, String>,
) -> std::result::Result<T, String> {
    let attempts = policy.max_attempts.max(1);
    let mut last = String::new();
    for n in 0..attempts {
        match attempt() {
            Ok(v) => return Ok(v),
            Err(e) => last = e,
        }
        if n + 1 < attempts && policy.initial_backoff_ms > 0 {
            std::thread::sleep(Duration::from_millis(policy.initial_backoff_ms << n.min(16)));
        }
    }
    Err(last)
}

/// Image reference for every manifest row, resolving relative paths against
/// `image_root`.
pub fn image_refs(manifest: &DatasetManifest, image_root: &Path) -> Vec<Option<ImageRef>> {
    manifest
        .images
        .iter()
        .map(|img| {
            img.path.as_ref().map(|p| {
                if p.starts_with("http://") || p.starts_with("https://") {
                    ImageRef::Url(p.clone())
                } else {
                    ImageRef::File(image_root.join(p))
                }
            })
        })
        .collect()
}

/// Annotates every (image, selected question) pair not already in the store
/// at `store_path`, with up to `max_concurrent` requests in flight.
///
/// Results funnel through a channel into this thread, which is the only
/// writer of the store. The store is checkpointed every `flush_every`
/// results and on exit, so an interrupted run resumes where it stopped.
pub fn annotate_dataset(
    manifest: &DatasetManifest,
    images: &[Option<ImageRef>],
    questions: &QuestionSet,
    endpoint: &dyn ChatEndpoint,
    config: &EndpointConfig,
    store_path: &Path,
) -> Result<AnnotationStore> {
    let image_ids: Vec<String> = manifest.images.iter().map(|i| i.id.clone()).collect();
    let mut store = if store_path.exists() {
        let s = AnnotationStore::load(store_path)?;
        s.check_against(&manifest.dataset_id, questions)?;
        if s.image_ids != image_ids {
            return Err(AnnotateError::Format("store images differ from manifest".into()));
        }
        s
    } else {
        AnnotationStore::empty(&manifest.dataset_id, questions, image_ids, true)
    };
    let pending = store.pending();
    if pending.is_empty() {
        return Ok(store);
    }

    let texts: Vec<String> = questions.selected_questions().iter().map(|q| q.text.clone()).collect();
    let mut urls: HashMap<usize, std::result::Result<String, String>> = HashMap::new();
    for &(row, _) in &pending {
        urls.entry(row)
            .or_insert_with(|| match images.get(row).and_then(Option::as_ref) {
                Some(img) => img.to_url().map_err(|e| e.to_string()),
                None => Err(format!("image {} has no path", manifest.images[row].id)),
            });
    }

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    let mut failed = Vec::new();
    let mut io_error = None;
    std::thread::scope(|scope| {
        for _ in 0..config.max_concurrent.max(1).min(pending.len()) {
            let tx = tx.clone();
            let (next, pending, urls, texts) = (&next, &pending, &urls, &texts);
            scope.spawn(move || loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(row, col)) = pending.get(k) else { break };
                let result = match &urls[&row] {
                    Err(e) => Err(e.clone()),
                    Ok(url) => {
                        let req = aspect_request(&config.model, url.clone(), &texts[col], config.top_logprobs);
                        with_retry(&config.retry, || {
                            let resp = endpoint.complete(&req).map_err(|e| e.to_string())?;
                            let l = extract_yes_no_logits(&resp).map_err(|e| e.to_string())?;
                            AspectAnnotation::from_logits(l.z_yes, l.z_no, l.imputed).map_err(|e| e.to_string())
                        })
                    }
                };
                if tx.send((row, col, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut since_flush = 0;
        for (row, col, result) in rx {
            match result {
                Ok(a) => store.set(row, col, a),
                Err(error) => failed.push(FailedPair {
                    image_id: store.image_ids[row].clone(),
                    question_id: store.question_ids[col],
                    error,
                }),
            }
            since_flush += 1;
            if since_flush >= config.flush_every.max(1) {
                since_flush = 0;
                if let Err(e) = store.save(store_path) {
                    io_error.get_or_insert(e);
                }
            }
        }
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    store.save(store_path)?;
    if !failed.is_empty() {
        failed.sort_by(|a, b| (&a.image_id, a.question_id).cmp(&(&b.image_id, b.question_id)));
        return Err(AnnotateError::Halted {
            store: store_path.to_path_buf(),
            failed,
        });
    }
    Ok(store)
}

/// Linear read-out over latent attributes: `w . a + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Probe {
    /// `+1` on one attribute, centred so the two states map to `+-0.5`.
    pub fn single(num_attributes: usize, attribute: usize) -> Self {
        let mut weights = vec![0.0; num_attributes];
        weights[attribute] = 1.0;
        Self { weights, bias: -0.5 }
    }

    pub fn eval(&self, latent: &[u8]) -> f64 {
        self.weights
            .iter()
            .zip(latent)
            .map(|(w, &a)| w * f64::from(a))
            .sum::<f64>()
            + self.bias
    }
}

/// Synthetic yes/no answerer: `q = sigmoid(scale * probe(latent))`, replaced
/// by `1 - q` with probability `noise_rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub probes: Vec<Probe>,
    pub scale: f64,
    pub noise_rate: f64,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSettings {
    pub scale: f64,
    pub noise_rate: f64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        // single-attribute probes give z = +-2, q ~ 0.88 / 0.12: the
        // confidence typical of endpoint yes/no answers
        Self {
            scale: 4.0,
            noise_rate: 0.05,
        }
    }
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl OracleSpec {
    /// A probe per selected question: questions naming an attribute read
    /// that attribute; other questions get a fixed random centred probe.
    pub fn for_questions(
        questions: &QuestionSet,
        attribute_names: &[String],
        settings: &OracleSettings,
        noise_seed: u64,
    ) -> Self {
        let k = attribute_names.len();
        let probes = questions
            .selected_questions()
            .iter()
            .map(|q| {
                let ws = words(&q.text);
                match attribute_names.iter().position(|a| ws.contains(&a.to_lowercase())) {
                    Some(j) => Probe::single(k, j),
                    None => {
                        let mut rng = seed::rng(noise_seed, &[seed::STREAM_ORACLE_PROBE, u64::from(q.id)]);
                        let weights: Vec<f64> = (0..k)
                            .map(|_| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                z / (k as f64).sqrt()
                            })
                            .collect();
                        let bias = -0.5 * weights.iter().sum::<f64>();
                        Probe { weights, bias }
                    }
                }
            })
            .collect();
        Self {
            probes,
            scale: settings.scale,
            noise_rate: settings.noise_rate,
            noise_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(AnnotateError::Oracle(format!("scale {} must be > 0", self.scale)));
        }
        if !(0.0..0.5).contains(&self.noise_rate) && self.noise_rate != 0.5 {
            return Err(AnnotateError::Oracle(format!(
                "noise rate {} outside [0, 0.5]",
                self.noise_rate
            )));
        }
        Ok(())
    }
}

fn id_hash(id: &str) -> u64 {
    // FNV-1a
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3)
    })
}

/// Complete store from latent attributes. Noise draws depend only on the
/// seed, image id and question id.
pub fn oracle_annotate(
    manifest: &DatasetManifest,
    questions: &QuestionSet,
    spec: &OracleSpec,
) -> Result<AnnotationStore> {
    spec.validate()?;
    if spec.probes.len() != questions.num_selected() {
        return Err(AnnotateError::ProbeCount {
            probes: spec.probes.len(),
            questions: questions.num_selected(),
        });
    }
    let latents = manifest.latents.as_ref().ok_or(AnnotateError::NoLatents)?;
    let ids: Vec<String> = manifest.images.iter().map(|i| i.id.clone()).collect();
    let mut store = AnnotationStore::empty(&manifest.dataset_id, questions, ids, true);
    for (row, latent) in latents.iter().enumerate() {
        let h = id_hash(&manifest.images[row].id);
        for (col, (probe, &qid)) in spec.probes.iter().zip(&questions.selected).enumerate() {
            let mut z = spec.scale * probe.eval(latent);
            let mut rng = seed::rng(spec.noise_seed, &[seed::STREAM_ORACLE_NOISE, h, u64::from(qid)]);
            if rng.gen::<f64>() < spec.noise_rate {
                z = -z;
            }
            store.set(row, col, AspectAnnotation::from_logits(z, 0.0, false)?);
        }
    }
    Ok(store)
}

/// Class logits of a teacher, one row per image id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TeacherLogits {
    pub num_classes: usize,
    pub by_image: HashMap<String, Vec<f64>>,
}

impl TeacherLogits {
    pub fn get(&self, image_id: &str) -> Option<&[f64]> {
        self.by_image.get(image_id).map(Vec::as_slice)
    }
}

/// Queries the endpoint for class logits of every image, sequentially.
pub fn endpoint_class_logits(
    manifest: &DatasetManifest,
    images: &[Option<ImageRef>],
    endpoint: &dyn ChatEndpoint,
    config: &EndpointConfig,
) -> Result<TeacherLogits> {
    let mut out = TeacherLogits {
        num_classes: manifest.num_classes(),
        ..Default::default()
    };
    for (img, r) in manifest.images.iter().zip(images) {
        let r = r
            .as_ref()
            .ok_or_else(|| ExtractError::Unencodable(format!("image {} has no path", img.id)))?;
        let req = build_class_query(&config.model, r, &manifest.class_names, config.top_logprobs)?;
        let logits = with_retry(&config.retry, || {
            let resp = endpoint.complete(&req).map_err(|e| e.to_string())?;
            extract_class_logits(&resp, manifest.num_classes()).map_err(|e| e.to_string())
        })
        .map_err(|e| AnnotateError::Endpoint(EndpointError::Transport(e)))?;
        out.by_image.insert(img.id.clone(), logits.logits);
    }
    Ok(out)
}

/// Synthetic zero-shot teacher: the logit of class `c` is `-scale` times the
/// fraction of attributes on which the image's latent code disagrees with
/// class `c`'s code, plus Gaussian noise.
pub fn oracle_class_logits(
    manifest: &DatasetManifest,
    scale: f64,
    noise_sd: f64,
    seed_value: u64,
) -> Result<TeacherLogits> {
    let latents = manifest.latents.as_ref().ok_or(AnnotateError::NoLatents)?;
    let c = manifest.num_classes();
    let mut codes: Vec<Option<&Vec<u8>>> = vec![None; c];
    for (img, lat) in manifest.images.iter().zip(latents) {
        codes[img.label].get_or_insert(lat);
    }
    let mut out = TeacherLogits {
        num_classes: c,
        ..Default::default()
    };
    for (img, lat) in manifest.images.iter().zip(latents) {
        let mut rng = seed::rng(seed_value, &[seed::STREAM_TEACHER, id_hash(&img.id)]);
        let k = lat.len().max(1) as f64;
        let logits = codes
            .iter()
            .map(|code| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let dist = code.map_or(k, |code| code.iter().zip(lat).filter(|(a, b)| a != b).count() as f64);
                -scale * dist / k + noise_sd * z
            })
            .collect();
        out.by_image.insert(img.id.clone(), logits);
    }
    Ok(out)
}
