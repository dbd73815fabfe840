//! Shared encoder, fusion transformer and autoregressive decoder used by both
//! the titration model and the glucose forecast model.
//!
//! ```text
//! profile ──DNN──────┐
//! basal 24 h ─BiLSTM─┼─ fusion transformer ─ X (one vector per slot)
//! temporal m ─BiLSTM─┘                         │
//!                         concat(X[j+1], y[j]) ─ decoder ─ conv head ─ y[j+1]
//! ```

mod checkpoint;
mod config;
mod features;
mod input;
mod layers;
mod network;
mod profile;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::pipeline::Channel;

pub use checkpoint::{read_header, CheckpointHeader, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{DecoderKind, ModelConfig, Precision, Task};
pub use features::FeatureGroup;
pub use input::{BasalHistory, Batch, ModelInput, NormStats, TemporalBundle};
pub use network::GlycemicNet;
pub use profile::{
    encode_profile, profile_width, DiabetesType, MedicalRecord, PatientProfile, Sex, BASIC_FEATURES,
    MEDICAL_FEATURES,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channel order {got:?} does not match the configured {expected:?}")]
    ChannelOrder { expected: Vec<Channel>, got: Vec<Channel> },
    #[error("branch inputs come from different clips: {temporal} vs {other}")]
    SourceMismatch { temporal: String, other: String },
    #[error("feature group mismatch: {0}")]
    FeatureGroupMismatch(String),
    #[error("cannot encode profile field {0}")]
    UnencodableField(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("no model loaded")]
    ModelNotLoaded,
    #[error("tensor: {0}")]
    Tensor(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<candle_core::Error> for ModelError {
    fn from(e: candle_core::Error) -> Self {
        ModelError::Tensor(e.to_string())
    }
}

/// A network with its configuration and normalization statistics.
///
/// Inference takes `&self` and never mutates weights, so a model can be
/// shared across threads.
pub struct GlycemicModel {
    config: ModelConfig,
    norm: NormStats,
    varmap: VarMap,
    net: GlycemicNet,
    device: Device,
}

impl std::fmt::Debug for GlycemicModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GlycemicModel")
            .field("config", &self.config)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

fn init_values(name: &str, dims: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let count: usize = dims.iter().product();
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if leaf == "gamma" {
        return vec![1.0; count];
    }
    if leaf == "beta" || leaf.starts_with("bias") {
        return vec![0.0; count];
    }
    if leaf == "type_emb" {
        return (0..count).map(|_| 0.02 * rng.sample::<f64, _>(StandardNormal)).collect();
    }
    let bound = if leaf.starts_with("weight_ih") || leaf.starts_with("weight_hh") {
        1.0 / ((dims[0] / 4) as f64).sqrt()
    } else {
        let fan_out = dims[0];
        let fan_in: usize = dims[1..].iter().product();
        (6.0 / (fan_in + fan_out) as f64).sqrt()
    };
    (0..count).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl GlycemicModel {
    /// Builds a model with weights drawn deterministically from `seed`.
    pub fn new(config: ModelConfig, norm: NormStats, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        norm.check(&config)?;
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, config.precision.dtype(), &device);
        let net = GlycemicNet::new(&config, vb)?;
        let model = GlycemicModel {
            config,
            norm,
            varmap,
            net,
            device,
        };
        model.reinitialize(seed)?;
        Ok(model)
    }

    /// Redraws every weight from `seed`, visiting variables in name order.
    pub fn reinitialize(&self, seed: u64) -> Result<(), ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, var) in self.named_vars() {
            let dims = var.dims().to_vec();
            let values = init_values(&name, &dims, &mut rng);
            let t = Tensor::from_vec(values, dims.as_slice(), &self.device)?.to_dtype(var.dtype())?;
            var.set(&t)?;
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn net(&self) -> &GlycemicNet {
        &self.net
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Variables sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().expect("varmap lock");
        let mut v: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    /// Variables whose name satisfies `keep`.
    pub fn vars_where(&self, keep: impl Fn(&str) -> bool) -> Vec<Var> {
        self.named_vars()
            .into_iter()
            .filter(|(n, _)| keep(n))
            .map(|(_, v)| v)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Every weight as `f64`, keyed by variable name.
    pub fn weights(&self) -> Result<BTreeMap<String, Vec<f64>>, ModelError> {
        self.named_vars()
            .into_iter()
            .map(|(n, v)| {
                let data = v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                Ok((n, data))
            })
            .collect()
    }

    /// Deep copy with independent weights.
    pub fn try_clone(&self) -> Result<Self, ModelError> {
        let copy = GlycemicModel::new(self.config.clone(), self.norm.clone(), 0)?;
        let src = self.named_vars();
        for ((_, dst), (_, s)) in copy.named_vars().iter().zip(&src) {
            dst.set(&s.as_tensor().copy()?)?;
        }
        Ok(copy)
    }

    pub fn batch(&self, inputs: &[&ModelInput]) -> Result<Batch, ModelError> {
        Batch::build(inputs, &self.config, &self.norm, &self.device)
    }

    /// Fused per-slot context `(B, m, d)`.
    pub fn context(&self, batch: &Batch) -> Result<Tensor, ModelError> {
        Ok(self
            .net
            .context(&batch.temporal, batch.basal.as_ref(), batch.profile.as_ref())?)
    }

    /// Normalized teacher-forced predictions `(B, m - n)`. Requires labels.
    pub fn teacher_forced(&self, batch: &Batch) -> Result<Tensor, ModelError> {
        let labels = batch
            .labels
            .as_ref()
            .ok_or_else(|| ModelError::ShapeMismatch("teacher forcing needs labels".into()))?;
        let ctx = self.context(batch)?;
        Ok(self.net.teacher_forced(&ctx, &batch.history, labels)?)
    }

    /// Default output bounds in canonical units: insulin is non-negative.
    pub fn default_bounds(&self) -> (Option<f64>, Option<f64>) {
        if self.config.task.target_channel().is_insulin() {
            (Some(0.0), None)
        } else {
            (None, None)
        }
    }

    /// Autoregressive forecast of the decoded series in canonical units.
    pub fn predict(&self, inputs: &[ModelInput]) -> Result<Vec<Vec<f64>>, ModelError> {
        self.predict_bounded(inputs, self.default_bounds())
    }

    /// As [`predict`](Self::predict) with explicit bounds (canonical units)
    /// applied to every generated value before it is fed back.
    pub fn predict_bounded(&self, inputs: &[ModelInput], bounds: (Option<f64>, Option<f64>)) -> Result<Vec<Vec<f64>>, ModelError> {
        let refs: Vec<&ModelInput> = inputs.iter().collect();
        let batch = self.batch(&refs)?;
        let ctx = self.context(&batch)?;
        let z = |v: Option<f64>| v.map(|x| self.norm.normalize_target(&self.config, x));
        let out = self.net.generate(&ctx, &batch.history, (z(bounds.0), z(bounds.1)))?;
        let rows = out.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        // a value the decoder clamped comes back as the bound itself, not the
        // bound after a round trip through the model's precision
        let stored = |z: Option<f64>| -> Option<f64> {
            z.map(|z| match self.config.precision {
                Precision::F32 => z as f32 as f64,
                Precision::F64 => z,
            })
        };
        let (zlo, zhi) = (stored(z(bounds.0)), stored(z(bounds.1)));
        Ok(rows
            .into_iter()
            .map(|r| {
                r.into_iter()
                    .map(|v| {
                        let x = self.norm.denormalize_target(&self.config, v);
                        match bounds {
                            (Some(lo), _) if x < lo || zlo.is_some_and(|b| v <= b) => lo,
                            (_, Some(hi)) if x > hi || zhi.is_some_and(|b| v >= b) => hi,
                            _ => x,
                        }
                    })
                    .collect()
            })
            .collect())
    }

    pub fn predict_one(&self, input: &ModelInput) -> Result<Vec<f64>, ModelError> {
        Ok(self.predict(std::slice::from_ref(input))?.remove(0))
    }

    /// Temporal encoder output `(m, 2 * temporal_hidden)` for one input.
    pub fn encode_temporal(&self, input: &ModelInput) -> Result<Vec<Vec<f64>>, ModelError> {
        let batch = self.batch(&[input])?;
        let t = self.net.encode_temporal(&batch.temporal)?;
        Ok(t.squeeze(0)?.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }

    /// Profile latent `(d)` for one input, `None` without a profile branch.
    pub fn encode_profile(&self, input: &ModelInput) -> Result<Option<Vec<f64>>, ModelError> {
        let batch = self.batch(&[input])?;
        match &batch.profile {
            Some(p) => Ok(self
                .net
                .encode_profile(p)?
                .map(|t| t.squeeze(0)?.to_dtype(DType::F64)?.to_vec1::<f64>())
                .transpose()?),
            None => Ok(None),
        }
    }

    /// Fused context `(m, d)` for one input.
    pub fn fuse(&self, input: &ModelInput) -> Result<Vec<Vec<f64>>, ModelError> {
        let batch = self.batch(&[input])?;
        Ok(self.context(&batch)?.squeeze(0)?.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }
}

/// Trainable parameter count of a freshly built model.
pub fn count_parameters(config: &ModelConfig) -> Result<usize, ModelError> {
    let model = GlycemicModel::new(config.clone(), NormStats::identity(config), 0)?;
    Ok(model.parameter_count())
}
