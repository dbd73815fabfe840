use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::profile::{encode_profile, PatientProfile};
use super::ModelError;
use crate::pipeline::{Channel, Clip, BASAL_HISTORY_SLOTS};

/// Per-slot channels over one window, in the order given by `channels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalBundle {
    pub source_id: String,
    pub channels: Vec<Channel>,
    /// One series of `m` values per channel.
    pub values: Vec<Vec<f64>>,
}

impl TemporalBundle {
    pub fn series(&self, channel: Channel) -> Option<&[f64]> {
        self.channels
            .iter()
            .position(|c| *c == channel)
            .map(|i| self.values[i].as_slice())
    }
}

/// Basal doses (IU) over the 96 slots before the future horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasalHistory {
    pub source_id: String,
    pub values: Vec<f64>,
}

/// Everything one forward pass needs, in canonical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInput {
    pub temporal: TemporalBundle,
    pub basal: Option<BasalHistory>,
    /// Raw profile vector from [`encode_profile`].
    pub profile: Option<Vec<f64>>,
    /// Past values of the decoded series, length `n`.
    pub target_history: Vec<f64>,
    /// Future values of the decoded series, when known.
    pub labels: Option<Vec<f64>>,
}

impl ModelInput {
    /// Joins branch inputs, refusing branches cut from different clips.
    pub fn assemble(
        temporal: TemporalBundle,
        basal: Option<BasalHistory>,
        profile: Option<Vec<f64>>,
        target_history: Vec<f64>,
        labels: Option<Vec<f64>>,
    ) -> Result<Self, ModelError> {
        if let Some(b) = &basal {
            if b.source_id != temporal.source_id {
                return Err(ModelError::SourceMismatch {
                    temporal: temporal.source_id.clone(),
                    other: b.source_id.clone(),
                });
            }
        }
        Ok(ModelInput {
            temporal,
            basal,
            profile,
            target_history,
            labels,
        })
    }

    /// Training or evaluation input cut from a clip.
    ///
    /// The decoded channel's future is masked; the conditioning channel's
    /// future keeps the recorded values (the glucose that followed, or the
    /// bolus doses that were given).
    pub fn from_clip(clip: &Clip, profile: Option<&PatientProfile>, config: &ModelConfig) -> Result<Self, ModelError> {
        if clip.history_len != config.history_len || clip.window_len() != config.window() {
            return Err(ModelError::ShapeMismatch(format!(
                "clip {} has window {}/{}, model expects {}/{}",
                clip.id(),
                clip.history_len,
                clip.window_len(),
                config.history_len,
                config.window()
            )));
        }
        let n = config.history_len;
        let target = config.task.target_channel();
        let condition = config.task.condition_channel();
        let mut view = clip.model_view();
        let ci = condition.grid_index().expect("numeric");
        view[ci][n..].copy_from_slice(&clip.channel(condition)[n..]);
        let channels = config.temporal_channels();
        let values = channels
            .iter()
            .map(|c| view[c.grid_index().expect("numeric")].clone())
            .collect();
        let source_id = clip.id();
        let basal = config.uses_basal().then(|| BasalHistory {
            source_id: source_id.clone(),
            values: clip.basal_history.clone(),
        });
        let profile = if config.feature_group.has_profile_branch() {
            Some(encode_profile(profile, config.feature_group)?)
        } else {
            None
        };
        let series = clip.channel(target);
        ModelInput::assemble(
            TemporalBundle {
                source_id,
                channels,
                values,
            },
            basal,
            profile,
            series[..n].to_vec(),
            Some(series[n..].to_vec()),
        )
    }

    /// Checks this input against the model's expected layout.
    pub fn check(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let expected = config.temporal_channels();
        if self.temporal.channels.len() != expected.len() || self.temporal.values.len() != expected.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} temporal channels, model expects {}",
                self.temporal.values.len(),
                expected.len()
            )));
        }
        if self.temporal.channels != expected {
            return Err(ModelError::ChannelOrder {
                expected,
                got: self.temporal.channels.clone(),
            });
        }
        let m = config.window();
        if let Some((c, s)) = self
            .temporal
            .channels
            .iter()
            .zip(&self.temporal.values)
            .find(|(_, s)| s.len() != m)
        {
            return Err(ModelError::ShapeMismatch(format!("channel {c} has {} slots, expected {m}", s.len())));
        }
        match (&self.basal, config.uses_basal()) {
            (Some(b), true) if b.values.len() != BASAL_HISTORY_SLOTS => {
                return Err(ModelError::ShapeMismatch(format!(
                    "basal history has {} slots, expected {BASAL_HISTORY_SLOTS}",
                    b.values.len()
                )))
            }
            (Some(b), true) if b.values.iter().any(|v| !v.is_finite() || *v < 0.0) => {
                return Err(ModelError::ShapeMismatch("basal history must be finite and non-negative".into()))
            }
            (Some(b), true) if b.source_id != self.temporal.source_id => {
                return Err(ModelError::SourceMismatch {
                    temporal: self.temporal.source_id.clone(),
                    other: b.source_id.clone(),
                })
            }
            (None, true) => return Err(ModelError::FeatureGroupMismatch("basal history required".into())),
            (Some(_), false) => {
                return Err(ModelError::FeatureGroupMismatch(format!(
                    "{} takes no basal history",
                    config.feature_group
                )))
            }
            _ => {}
        }
        let pw = config.profile_width();
        match (&self.profile, config.feature_group.has_profile_branch()) {
            (Some(p), true) if p.len() != pw => {
                return Err(ModelError::ShapeMismatch(format!("profile width {}, expected {pw}", p.len())))
            }
            (None, true) => return Err(ModelError::FeatureGroupMismatch("profile vector required".into())),
            (Some(_), false) => {
                return Err(ModelError::FeatureGroupMismatch(format!(
                    "{} takes no profile",
                    config.feature_group
                )))
            }
            _ => {}
        }
        if self.target_history.len() != config.history_len {
            return Err(ModelError::ShapeMismatch(format!(
                "target history has {} slots, expected {}",
                self.target_history.len(),
                config.history_len
            )));
        }
        if let Some(l) = &self.labels {
            if l.len() != config.future_len {
                return Err(ModelError::ShapeMismatch(format!(
                    "{} labels, expected {}",
                    l.len(),
                    config.future_len
                )));
            }
        }
        let all = self
            .temporal
            .values
            .iter()
            .flatten()
            .chain(&self.target_history)
            .chain(self.labels.iter().flatten())
            .chain(self.profile.iter().flatten());
        for v in all {
            if !v.is_finite() {
                return Err(ModelError::ShapeMismatch("non-finite input value".into()));
            }
        }
        Ok(())
    }
}

/// Z-score statistics fitted on training inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub channels: Vec<Channel>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub basal_mean: f64,
    pub basal_std: f64,
    pub profile_mean: Vec<f64>,
    pub profile_std: Vec<f64>,
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
    for v in values {
        n += 1;
        sum += v;
        sq += v * v;
    }
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    let std = var.sqrt();
    (mean, if std < 1e-6 { 1.0 } else { std })
}

impl NormStats {
    /// Zero mean, unit scale: values pass through unchanged.
    pub fn identity(config: &ModelConfig) -> Self {
        let c = config.temporal_channels();
        let p = config.profile_width();
        NormStats {
            mean: vec![0.0; c.len()],
            std: vec![1.0; c.len()],
            channels: c,
            basal_mean: 0.0,
            basal_std: 1.0,
            profile_mean: vec![0.0; p],
            profile_std: vec![1.0; p],
        }
    }

    /// Fits on `inputs`. The decoded channel includes its labels; masked
    /// slots are excluded.
    pub fn fit(inputs: &[ModelInput], config: &ModelConfig) -> Result<Self, ModelError> {
        for i in inputs {
            i.check(config)?;
        }
        let channels = config.temporal_channels();
        let target = config.task.target_channel();
        let n = config.history_len;
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for (k, c) in channels.iter().enumerate() {
            let (m, s) = if *c == target {
                mean_std(inputs.iter().flat_map(|i| {
                    i.temporal.values[k][..n]
                        .iter()
                        .chain(i.labels.iter().flatten())
                        .copied()
                        .collect::<Vec<_>>()
                }))
            } else {
                mean_std(inputs.iter().flat_map(|i| i.temporal.values[k].iter().copied()))
            };
            mean.push(m);
            std.push(s);
        }
        let (basal_mean, basal_std) = mean_std(inputs.iter().flat_map(|i| i.basal.iter().flat_map(|b| b.values.iter().copied())));
        let pw = config.profile_width();
        let (profile_mean, profile_std) = (0..pw)
            .map(|j| mean_std(inputs.iter().filter_map(|i| i.profile.as_ref().map(|p| p[j]))))
            .unzip();
        Ok(NormStats {
            channels,
            mean,
            std,
            basal_mean,
            basal_std,
            profile_mean,
            profile_std,
        })
    }

    fn target_index(&self, config: &ModelConfig) -> usize {
        self.channels
            .iter()
            .position(|c| *c == config.task.target_channel())
            .expect("target channel present")
    }

    pub fn normalize_target(&self, config: &ModelConfig, v: f64) -> f64 {
        let k = self.target_index(config);
        (v - self.mean[k]) / self.std[k]
    }

    pub fn denormalize_target(&self, config: &ModelConfig, z: f64) -> f64 {
        let k = self.target_index(config);
        z * self.std[k] + self.mean[k]
    }

    pub fn check(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let ok = self.channels == config.temporal_channels()
            && self.mean.len() == self.channels.len()
            && self.std.len() == self.channels.len()
            && self.profile_mean.len() == config.profile_width()
            && self.profile_std.len() == config.profile_width();
        if !ok {
            return Err(ModelError::InvalidConfig("normalization statistics do not match the model".into()));
        }
        Ok(())
    }
}

/// Normalized tensors for a batch of inputs.
pub struct Batch {
    /// `(B, m, C)`
    pub temporal: Tensor,
    /// `(B, 96, 1)`
    pub basal: Option<Tensor>,
    /// `(B, P)`
    pub profile: Option<Tensor>,
    /// `(B, n)`
    pub history: Tensor,
    /// `(B, m - n)`
    pub labels: Option<Tensor>,
}

impl Batch {
    pub fn build(inputs: &[&ModelInput], config: &ModelConfig, norm: &NormStats, device: &Device) -> Result<Self, ModelError> {
        if inputs.is_empty() {
            return Err(ModelError::ShapeMismatch("empty batch".into()));
        }
        for i in inputs {
            i.check(config)?;
        }
        let b = inputs.len();
        let m = config.window();
        let n = config.history_len;
        let f = config.future_len;
        let channels = config.temporal_channels();
        let c = channels.len();
        let target_k = channels
            .iter()
            .position(|x| *x == config.task.target_channel())
            .expect("validated");
        let dtype = config.precision.dtype();

        let mut temporal = Vec::with_capacity(b * m * c);
        for inp in inputs {
            for slot in 0..m {
                for k in 0..c {
                    let z = if k == target_k && slot >= n {
                        0.0
                    } else {
                        (inp.temporal.values[k][slot] - norm.mean[k]) / norm.std[k]
                    };
                    temporal.push(z);
                }
            }
        }
        let temporal = Tensor::from_vec(temporal, (b, m, c), device)?.to_dtype(dtype)?;

        let basal = if config.uses_basal() {
            let v: Vec<f64> = inputs
                .iter()
                .flat_map(|i| {
                    i.basal
                        .as_ref()
                        .expect("checked")
                        .values
                        .iter()
                        .map(|x| (x - norm.basal_mean) / norm.basal_std)
                })
                .collect();
            Some(Tensor::from_vec(v, (b, BASAL_HISTORY_SLOTS, 1), device)?.to_dtype(dtype)?)
        } else {
            None
        };

        let profile = if config.feature_group.has_profile_branch() {
            let pw = config.profile_width();
            let v: Vec<f64> = inputs
                .iter()
                .flat_map(|i| {
                    i.profile
                        .as_ref()
                        .expect("checked")
                        .iter()
                        .enumerate()
                        .map(|(j, x)| (x - norm.profile_mean[j]) / norm.profile_std[j])
                })
                .collect();
            Some(Tensor::from_vec(v, (b, pw), device)?.to_dtype(dtype)?)
        } else {
            None
        };

        let (tm, ts) = (norm.mean[target_k], norm.std[target_k]);
        let history: Vec<f64> = inputs
            .iter()
            .flat_map(|i| i.target_history.iter().map(|x| (x - tm) / ts))
            .collect();
        let history = Tensor::from_vec(history, (b, n), device)?.to_dtype(dtype)?;

        let labels = if inputs.iter().all(|i| i.labels.is_some()) {
            let v: Vec<f64> = inputs
                .iter()
                .flat_map(|i| i.labels.as_ref().expect("all some").iter().map(|x| (x - tm) / ts))
                .collect();
            Some(Tensor::from_vec(v, (b, f), device)?.to_dtype(dtype)?)
        } else {
            None
        };

        Ok(Batch {
            temporal,
            basal,
            profile,
            history,
            labels,
        })
    }
}
