//! Feed-forward classifier whose final layer is widened from `C` to `C + Q`.
//!
//! Parameters are drawn output unit by output unit, so the first `C` columns
//! of the head are identical whatever `Q` is. A model built with `Q = 0` is
//! therefore exactly the class slice of any expanded model with the same
//! seed.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::ExpandedOutput;
use crate::numerics::{NodeId, NumericsError, Record, Tensor};
use crate::seed;

const CHECKPOINT_MAGIC: &[u8; 8] = b"MAKDCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("layer {0} has zero width")]
    ZeroWidth(usize),
    #[error("model needs at least one class")]
    NoClasses,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub num_aspects: usize,
    #[serde(default)]
    pub activation: Activation,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_classes: usize, num_aspects: usize, init_seed: u64) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![128, 64],
            num_classes,
            num_aspects,
            activation: Activation::Relu,
            init_seed,
        }
    }

    /// `D = C + Q`.
    pub fn output_dim(&self) -> usize {
        self.num_classes + self.num_aspects
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend(&self.hidden_dims);
        w.push(self.output_dim());
        w
    }
}

/// Weight is stored `fan_in x fan_out` so a batch maps as `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Layer>,
}

impl Model {
    pub fn build(config: ModelConfig) -> Result<Self> {
        if config.num_classes == 0 {
            return Err(ModelError::NoClasses);
        }
        let widths = config.widths();
        if let Some(i) = widths.iter().position(|&w| w == 0) {
            return Err(ModelError::ZeroWidth(i));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                // the usual default for linear layers: U(-1/sqrt(fan_in), 1/sqrt(fan_in))
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut rng = seed::rng(config.init_seed, &[seed::STREAM_INIT, l as u64]);
                let mut w = vec![0.0; fan_in * fan_out];
                for j in 0..fan_out {
                    for i in 0..fan_in {
                        w[i * fan_out + j] = rng.gen_range(-bound..bound);
                    }
                }
                Ok(Layer {
                    weight: Tensor::matrix(fan_in, fan_out, w)?,
                    bias: Tensor::zeros(&[fan_out]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn num_aspects(&self) -> usize {
        self.config.num_aspects
    }

    /// Parameters in record-input order: `w0, b0, w1, b1, ...`.
    pub fn parameters(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn all_finite(&self) -> bool {
        self.parameters().all(|p| p.values().iter().all(|v| v.is_finite()))
    }

    /// Declares the parameters as record inputs and emits the forward pass
    /// for `x`. Returns the parameter node ids and the logits node.
    pub fn emit(&self, rec: &mut Record, x: NodeId) -> Result<(Vec<NodeId>, NodeId)> {
        let mut params = Vec::with_capacity(self.layers.len() * 2);
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = rec.input(layer.weight.shape());
            let b = rec.input(layer.bias.shape());
            params.extend([w, b]);
            let z = rec.matmul(h, w)?;
            h = rec.add_row(z, b)?;
            if l + 1 < self.layers.len() {
                h = match self.config.activation {
                    Activation::Relu => rec.relu(h),
                    Activation::Sigmoid => rec.sigmoid(h),
                };
            }
        }
        Ok((params, h))
    }

    /// Raw `B x (C + Q)` logits.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        if batch.shape().len() != 2 || batch.cols() != self.config.input_dim {
            return Err(NumericsError::ShapeMismatch {
                op: "predict",
                detail: format!("batch {:?} for input width {}", batch.shape(), self.config.input_dim),
            }
            .into());
        }
        let mut rec = Record::new();
        let x = rec.input(batch.shape());
        self.emit(&mut rec, x)?;
        let mut inputs = vec![batch.clone()];
        inputs.extend(self.parameters().cloned());
        Ok(rec.forward(&inputs)?)
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<ExpandedOutput>> {
        let logits = self.logits(batch)?;
        let c = self.config.num_classes;
        (0..logits.rows())
            .map(|r| ExpandedOutput::new(logits.row(r).to_vec(), c).map_err(|e| ModelError::Checkpoint(e.to_string())))
            .collect()
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let config = serde_json::to_vec(&self.config).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(config.len() as u64).to_le_bytes())?;
        w.write_all(&config)?;
        for p in self.parameters() {
            w.write_all(&(p.len() as u64).to_le_bytes())?;
            for v in p.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("not a model checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let len = read_u64(&mut r)? as usize;
        let mut config = vec![0u8; len];
        r.read_exact(&mut config)?;
        let config: ModelConfig = serde_json::from_slice(&config).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut model = Model::build(config)?;
        for p in model.parameters_mut() {
            let n = read_u64(&mut r)? as usize;
            if n != p.len() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter length {n}, expected {}",
                    p.len()
                )));
            }
            for v in p.values_mut() {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(bytes.as_slice())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
