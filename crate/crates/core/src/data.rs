//! Synthetic fine-grained benchmark and dataset files.
//!
//! Every class owns a distinct bit-vector over `K` latent attributes. Each
//! attribute is a fixed random unit direction in feature space, a class
//! prototype is the scaled sum of its active directions, and each sample is
//! its class prototype plus isotropic Gaussian noise. Classes therefore
//! differ only in which attributes they carry, which is what the aspect
//! oracle reads.
//!
//! Latent attributes live in the manifest and never enter the feature matrix.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;
use crate::seed;

pub const MANIFEST_FORMAT: &str = "makd-manifest";
pub const MANIFEST_VERSION: u32 = 1;
const FEATURE_MAGIC: &[u8; 8] = b"MAKDFEAT";
const FEATURE_VERSION: u32 = 1;

/// Fractions of the training split used by the reduced-data protocol.
pub const TRAIN_FRACTIONS: [f64; 4] = [0.4, 0.6, 0.8, 1.0];

const ATTRIBUTE_WORDS: &[&str] = &[
    "striped",
    "spotted",
    "winged",
    "horned",
    "metallic",
    "furry",
    "crested",
    "webbed",
    "glossy",
    "tufted",
    "banded",
    "speckled",
    "ridged",
    "feathered",
    "scaled",
    "hooked",
    "tailed",
    "hooded",
    "masked",
    "curled",
    "slender",
    "stocky",
    "ringed",
    "mottled",
];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("feature_dim {feature_dim} is smaller than the {attributes} attributes")]
    FeatureDimTooSmall { feature_dim: usize, attributes: usize },
    #[error("{classes} classes need distinct codes but only {available} exist")]
    TooManyClasses { classes: usize, available: u128 },
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("training fraction {0} must lie in (0, 1]")]
    Fraction(f64),
    #[error("class {0} has no training samples after subsampling")]
    EmptyClass(usize),
    #[error("split {0:?} is empty")]
    EmptySplit(Split),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("feature file: {0}")]
    Features(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub num_attributes: usize,
    pub feature_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub prototype_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            num_attributes: 12,
            feature_dim: 32,
            train_per_class: 40,
            test_per_class: 50,
            prototype_scale: 1.5,
            noise_sigma: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub split: Split,
    /// Zero-based class index.
    pub label: usize,
    /// Image location for live annotation; synthetic samples have none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute_names: Option<Vec<String>>,
    pub images: Vec<ImageEntry>,
    /// Per-image latent attribute bits, row-aligned with `images`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latents: Option<Vec<Vec<u8>>>,
    pub feature_file: String,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        if c == 0 {
            return Err(DataError::Manifest("no classes".into()));
        }
        let mut ids = HashSet::new();
        for img in &self.images {
            if img.label >= c {
                return Err(DataError::Manifest(format!(
                    "image {} has label {} for {c} classes",
                    img.id, img.label
                )));
            }
            if !ids.insert(img.id.as_str()) {
                return Err(DataError::Manifest(format!("duplicate image id {}", img.id)));
            }
        }
        if let Some(lat) = &self.latents {
            if lat.len() != self.images.len() {
                return Err(DataError::Manifest("latent rows do not match images".into()));
            }
        }
        Ok(())
    }
}

/// Features plus manifest. Feature rows are aligned with `manifest.images`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub features: Tensor,
}

/// A view of one split: feature rows, labels and the manifest row of each.
#[derive(Debug, Clone)]
pub struct SplitView {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub rows: Vec<usize>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn rows_in(&self, split: Split) -> Vec<usize> {
        self.manifest
            .images
            .iter()
            .enumerate()
            .filter(|(_, img)| img.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn view(&self, split: Split) -> Result<SplitView> {
        let rows = self.rows_in(split);
        if rows.is_empty() {
            return Err(DataError::EmptySplit(split));
        }
        let d = self.feature_dim();
        let mut values = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            values.extend_from_slice(self.features.row(r));
        }
        Ok(SplitView {
            features: Tensor::matrix(rows.len(), d, values).expect("rows non-empty"),
            labels: rows.iter().map(|&r| self.manifest.images[r].label).collect(),
            rows,
        })
    }

    /// Writes `manifest.json` and the feature file into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut doc = serde_json::to_value(&self.manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
        doc["format"] = MANIFEST_FORMAT.into();
        doc["version"] = MANIFEST_VERSION.into();
        let text = serde_json::to_string_pretty(&doc).map_err(|e| DataError::Manifest(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), text + "\n")?;
        let mut buf = Vec::new();
        write_features(&self.features, &mut buf)?;
        std::fs::write(dir.join(&self.manifest.feature_file), buf)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = load_manifest(&dir.join("manifest.json"))?;
        let bytes = std::fs::read(dir.join(&manifest.feature_file))?;
        let features = read_features(bytes.as_slice())?;
        if features.rows() != manifest.num_images() {
            return Err(DataError::Features(format!(
                "{} feature rows for {} images",
                features.rows(),
                manifest.num_images()
            )));
        }
        Ok(Self { manifest, features })
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)?;
    let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    if doc["format"] != MANIFEST_FORMAT {
        return Err(DataError::Manifest("not a dataset manifest".into()));
    }
    if doc["version"] != MANIFEST_VERSION {
        return Err(DataError::Manifest(format!("unsupported version {}", doc["version"])));
    }
    let manifest: DatasetManifest = serde_json::from_value(doc).map_err(|e| DataError::Manifest(e.to_string()))?;
    manifest.validate()?;
    Ok(manifest)
}

/// `MAKDFEAT`, version, rows, cols, then little-endian `f64` values.
pub fn write_features<W: Write>(features: &Tensor, mut w: W) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(features.rows() as u64).to_le_bytes())?;
    w.write_all(&(features.cols() as u64).to_le_bytes())?;
    for v in features.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(DataError::Features("bad magic".into()));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)?;
    if u32::from_le_bytes(v4) != FEATURE_VERSION {
        return Err(DataError::Features("unsupported version".into()));
    }
    let mut v8 = [0u8; 8];
    r.read_exact(&mut v8)?;
    let rows = u64::from_le_bytes(v8) as usize;
    r.read_exact(&mut v8)?;
    let cols = u64::from_le_bytes(v8) as usize;
    let mut values = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        r.read_exact(&mut v8)?;
        values.push(f64::from_le_bytes(v8));
    }
    Tensor::matrix(rows, cols, values).map_err(|e| DataError::Features(e.to_string()))
}

/// Ground truth kept alongside a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    /// `C x K` attribute bits.
    pub class_attributes: Vec<Vec<u8>>,
    /// `K` unit vectors of length `feature_dim`.
    pub attribute_directions: Vec<Vec<f64>>,
    /// `C` prototypes of length `feature_dim`.
    pub prototypes: Vec<Vec<f64>>,
}

pub fn attribute_names(k: usize) -> Vec<String> {
    (0..k)
        .map(|j| match ATTRIBUTE_WORDS.get(j) {
            Some(w) => w.to_string(),
            None => format!("attribute{j}"),
        })
        .collect()
}

fn class_name(bits: &[u8], names: &[String], index: usize) -> String {
    let active: Vec<&str> = bits
        .iter()
        .zip(names)
        .filter(|(b, _)| **b == 1)
        .map(|(_, n)| n.as_str())
        .collect();
    if active.is_empty() {
        format!("plain-{index:02}")
    } else {
        active.join("-")
    }
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(Dataset, SyntheticTruth)> {
    let (c, k, d) = (config.num_classes, config.num_attributes, config.feature_dim);
    if c == 0 || k == 0 || d == 0 {
        return Err(DataError::Config(
            "classes, attributes and feature_dim must be positive".into(),
        ));
    }
    if d < k {
        return Err(DataError::FeatureDimTooSmall {
            feature_dim: d,
            attributes: k,
        });
    }
    let available = if k >= 127 { u128::MAX } else { 1u128 << k };
    if c as u128 > available {
        return Err(DataError::TooManyClasses { classes: c, available });
    }
    if !(config.noise_sigma >= 0.0) || !config.prototype_scale.is_finite() {
        return Err(DataError::Config("noise_sigma must be >= 0 and scale finite".into()));
    }
    if config.train_per_class == 0 || config.test_per_class == 0 {
        return Err(DataError::Config("both splits need samples".into()));
    }
    let mut rng = seed::rng(config.seed, &[seed::STREAM_SYNTH]);

    let mut seen = HashSet::new();
    let mut class_attributes = Vec::with_capacity(c);
    while class_attributes.len() < c {
        let bits: Vec<u8> = (0..k).map(|_| rng.gen_range(0..2u8)).collect();
        if seen.insert(bits.clone()) {
            class_attributes.push(bits);
        }
    }

    let attribute_directions: Vec<Vec<f64>> = (0..k)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();

    let prototypes: Vec<Vec<f64>> = class_attributes
        .iter()
        .map(|bits| {
            let mut p = vec![0.0; d];
            for (b, dir) in bits.iter().zip(&attribute_directions) {
                if *b == 1 {
                    for (pi, di) in p.iter_mut().zip(dir) {
                        *pi += config.prototype_scale * di;
                    }
                }
            }
            p
        })
        .collect();

    let names = attribute_names(k);
    let class_names: Vec<String> = class_attributes
        .iter()
        .enumerate()
        .map(|(i, bits)| class_name(bits, &names, i))
        .collect();

    let mut images = Vec::new();
    let mut latents = Vec::new();
    let mut values = Vec::new();
    for (split, per_class) in [
        (Split::Train, config.train_per_class),
        (Split::Test, config.test_per_class),
    ] {
        let tag = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        for (label, proto) in prototypes.iter().enumerate() {
            for n in 0..per_class {
                images.push(ImageEntry {
                    id: format!("{tag}-c{label:03}-{n:04}"),
                    split,
                    label,
                    path: None,
                });
                latents.push(class_attributes[label].clone());
                for &p in proto {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    values.push(p + config.noise_sigma * z);
                }
            }
        }
    }
    let rows = images.len();
    let manifest = DatasetManifest {
        dataset_id: format!("synthetic-c{c}-k{k}-d{d}-s{}", config.seed),
        class_names,
        attribute_names: Some(names),
        images,
        latents: Some(latents),
        feature_file: "features.bin".into(),
    };
    let features = Tensor::matrix(rows, d, values).expect("non-empty");
    Ok((
        Dataset { manifest, features },
        SyntheticTruth {
            class_attributes,
            attribute_directions,
            prototypes,
        },
    ))
}

/// Keeps `floor(n_c * fraction)` training samples of every class `c`.
///
/// For a fixed seed each class is permuted once and the kept samples are a
/// prefix of that permutation, so smaller fractions are subsets of larger
/// ones. The test split is untouched.
pub fn subsample_train(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Fraction(fraction));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, img) in dataset.manifest.images.iter().enumerate() {
        if img.split == Split::Train {
            by_class.entry(img.label).or_default().push(i);
        }
    }
    let mut keep: HashSet<usize> = HashSet::new();
    for (&label, rows) in &by_class {
        let mut rows = rows.clone();
        let mut rng = seed::rng(seed, &[seed::STREAM_SUBSAMPLE, label as u64]);
        rows.shuffle(&mut rng);
        // small epsilon so 0.6 * 5 keeps 3 rather than 2
        let n = ((rows.len() as f64) * fraction + 1e-9).floor() as usize;
        if n == 0 {
            return Err(DataError::EmptyClass(label));
        }
        keep.extend(&rows[..n]);
    }
    let selected: Vec<usize> = (0..dataset.manifest.images.len())
        .filter(|i| dataset.manifest.images[*i].split == Split::Test || keep.contains(i))
        .collect();
    Ok(select_rows(dataset, &selected))
}

fn select_rows(dataset: &Dataset, rows: &[usize]) -> Dataset {
    let m = &dataset.manifest;
    let d = dataset.feature_dim();
    let mut values = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        values.extend_from_slice(dataset.features.row(r));
    }
    Dataset {
        manifest: DatasetManifest {
            dataset_id: m.dataset_id.clone(),
            class_names: m.class_names.clone(),
            attribute_names: m.attribute_names.clone(),
            images: rows.iter().map(|&r| m.images[r].clone()).collect(),
            latents: m.latents.as_ref().map(|l| rows.iter().map(|&r| l[r].clone()).collect()),
            feature_file: m.feature_file.clone(),
        },
        features: Tensor::matrix(rows.len(), d, values).expect("non-empty selection"),
    }
}
