use serde::{Deserialize, Serialize};

use super::features::FeatureGroup;
use super::profile::profile_width;
use super::ModelError;
use crate::pipeline::Channel;

/// Which series the decoder generates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Decodes future bolus doses, conditioned on a target glucose trace.
    Titration,
    /// Decodes future glucose, conditioned on a candidate bolus plan.
    GlucoseForecast,
}

impl Task {
    /// Channel the decoder generates.
    pub fn target_channel(self) -> Channel {
        match self {
            Task::Titration => Channel::BolusInsulin,
            Task::GlucoseForecast => Channel::Glucose,
        }
    }

    /// The other label channel, whose future slots carry conditioning.
    pub fn condition_channel(self) -> Channel {
        match self {
            Task::Titration => Channel::Glucose,
            Task::GlucoseForecast => Channel::BolusInsulin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Transformer,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub decoder_kind: DecoderKind,
    pub feature_group: FeatureGroup,
    /// History length `n`.
    pub history_len: usize,
    /// Generated slots `m - n`.
    pub future_len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub fusion_layers: usize,
    pub decoder_layers: usize,
    /// Hidden size per direction of the temporal BiLSTM.
    pub temporal_hidden: usize,
    /// Hidden size per direction of the basal BiLSTM.
    pub basal_hidden: usize,
    pub profile_hidden: usize,
    pub head_channels: usize,
    pub head_kernel: usize,
    pub precision: Precision,
}

impl ModelConfig {
    /// Full-size titration model on G7.
    pub fn titration() -> Self {
        ModelConfig {
            task: Task::Titration,
            decoder_kind: DecoderKind::Transformer,
            feature_group: FeatureGroup::TITRATION_DEFAULT,
            history_len: 24,
            future_len: 8,
            d_model: 256,
            heads: 8,
            ffn_dim: 1024,
            fusion_layers: 6,
            decoder_layers: 7,
            temporal_hidden: 256,
            basal_hidden: 64,
            profile_hidden: 128,
            head_channels: 128,
            head_kernel: 3,
            precision: Precision::F32,
        }
    }

    /// Full-size glucose forecast model on G5.
    pub fn glucose() -> Self {
        ModelConfig {
            task: Task::GlucoseForecast,
            feature_group: FeatureGroup::FORECAST_DEFAULT,
            ..Self::titration()
        }
    }

    /// Small configuration for tests and quick experiments.
    pub fn tiny(task: Task, feature_group: FeatureGroup) -> Self {
        ModelConfig {
            task,
            decoder_kind: DecoderKind::Transformer,
            feature_group,
            history_len: 24,
            future_len: 8,
            d_model: 16,
            heads: 2,
            ffn_dim: 32,
            fusion_layers: 1,
            decoder_layers: 1,
            temporal_hidden: 8,
            basal_hidden: 4,
            profile_hidden: 8,
            head_channels: 8,
            head_kernel: 3,
            precision: Precision::F32,
        }
    }

    pub fn window(&self) -> usize {
        self.history_len + self.future_len
    }

    pub fn temporal_channels(&self) -> Vec<Channel> {
        self.feature_group.temporal_channels()
    }

    pub fn profile_width(&self) -> usize {
        profile_width(self.feature_group)
    }

    pub fn uses_basal(&self) -> bool {
        self.feature_group.uses_basal_history()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.history_len == 0 || self.future_len == 0 {
            return bad("history_len and future_len must be positive");
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.ffn_dim == 0 || self.temporal_hidden == 0 || self.head_channels == 0 || self.head_kernel == 0 {
            return bad("widths and kernel must be positive");
        }
        if self.uses_basal() && self.basal_hidden == 0 {
            return bad("basal_hidden must be positive when the basal branch is used");
        }
        if self.feature_group.has_profile_branch() && self.profile_hidden == 0 {
            return bad("profile_hidden must be positive when the profile branch is used");
        }
        if !self.temporal_channels().contains(&self.task.target_channel())
            || !self.temporal_channels().contains(&self.task.condition_channel())
        {
            return bad("feature group lacks the glucose or bolus channel");
        }
        Ok(())
    }
}
