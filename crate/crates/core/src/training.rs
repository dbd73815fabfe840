//! Foundation training, personalization, evaluation and feature-group
//! ablation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info};

use crate::metrics::mean_absolute_error;
use crate::model::{FeatureGroup, GlycemicModel, ModelConfig, ModelError, ModelInput, NormStats, PatientProfile};
use crate::pipeline::{split, Clip, DatasetSplit, MIN_SPLIT_CLIPS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("training split is empty")]
    EmptySplit,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("unknown fine-tuning mode {0:?} (expected single, foundation, ft_full, ft_cnn_dense or ft_dense)")]
    ModeUnknown(String),
    #[error("loss diverged to {loss} at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<candle_core::Error> for TrainError {
    fn from(e: candle_core::Error) -> Self {
        TrainError::Model(e.into())
    }
}

/// Training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mae,
    /// Smooth alternative used by gradient checks.
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub loss: LossKind,
    pub seed: u64,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// Probability per batch of feeding the decoder its own generated
    /// future instead of the ground truth.
    pub scheduled_sampling: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 0.005,
            weight_decay: 0.01,
            max_epochs: 200,
            early_stop_patience: 40,
            loss: LossKind::Mae,
            seed: 0,
            max_steps: None,
            scheduled_sampling: 0.0,
        }
    }
}

/// Which weights personalization may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Fresh model trained on the patient's data only.
    Single,
    /// Foundation weights used as-is.
    Foundation,
    FtFull,
    FtCnnDense,
    FtDense,
}

impl FinetuneMode {
    pub const ALL: [FinetuneMode; 5] = [
        FinetuneMode::Single,
        FinetuneMode::Foundation,
        FinetuneMode::FtFull,
        FinetuneMode::FtCnnDense,
        FinetuneMode::FtDense,
    ];

    /// Whether the variable `name` is trained under this mode.
    pub fn trainable(self, name: &str) -> bool {
        match self {
            FinetuneMode::Single | FinetuneMode::FtFull => true,
            FinetuneMode::Foundation => false,
            FinetuneMode::FtCnnDense => name.starts_with("head."),
            FinetuneMode::FtDense => name.starts_with("head.dense."),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FinetuneMode::Single => "single",
            FinetuneMode::Foundation => "foundation",
            FinetuneMode::FtFull => "ft_full",
            FinetuneMode::FtCnnDense => "ft_cnn_dense",
            FinetuneMode::FtDense => "ft_dense",
        }
    }
}

impl fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FinetuneMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', '&'], "_");
        FinetuneMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| TrainError::ModeUnknown(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Mean batch loss in normalized units.
    pub train_loss: f64,
    /// Autoregressive MAE on the validation clips in canonical units.
    pub val_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
    pub steps: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    /// Summary entries for checkpoint metadata.
    pub fn info(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("epochs".into(), self.history.len().to_string());
        m.insert("steps".into(), self.steps.to_string());
        if let Some(v) = self.best_val_mae {
            m.insert("best_val_mae".into(), format!("{v}"));
        }
        if let Some(e) = self.best_epoch {
            m.insert("best_epoch".into(), e.to_string());
        }
        m
    }
}

/// Builds model inputs for clips, looking profiles up by patient id.
pub fn clip_inputs(
    clips: &[Clip],
    profiles: &BTreeMap<String, PatientProfile>,
    config: &ModelConfig,
) -> Result<Vec<ModelInput>, ModelError> {
    clips
        .iter()
        .map(|c| ModelInput::from_clip(c, profiles.get(&c.patient_id), config))
        .collect()
}

fn batch_loss(pred: &Tensor, labels: &Tensor, loss: LossKind) -> candle_core::Result<Tensor> {
    let diff = (pred - labels)?;
    match loss {
        LossKind::Mae => diff.abs()?.mean_all(),
        LossKind::Mse => diff.sqr()?.mean_all(),
    }
}

/// Normalized training loss of `model` on `inputs` with teacher forcing.
pub fn loss_on(model: &GlycemicModel, inputs: &[ModelInput], loss: LossKind) -> Result<Tensor, TrainError> {
    let refs: Vec<&ModelInput> = inputs.iter().collect();
    let batch = model.batch(&refs)?;
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| TrainError::InsufficientData("inputs without labels".into()))?;
    let pred = model.teacher_forced(&batch)?;
    Ok(batch_loss(&pred, labels, loss)?)
}

/// Autoregressive MAE in canonical units.
pub fn inputs_mae(model: &GlycemicModel, inputs: &[ModelInput]) -> Result<f64, TrainError> {
    let (pred, reference) = predict_all(model, inputs)?;
    Ok(mean_absolute_error(&pred, &reference).map_err(|e| TrainError::InsufficientData(e.to_string()))?)
}

fn predict_all(model: &GlycemicModel, inputs: &[ModelInput]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), TrainError> {
    let mut pred = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(64) {
        pred.extend(model.predict(chunk)?);
    }
    let reference = inputs
        .iter()
        .map(|i| {
            i.labels
                .clone()
                .ok_or_else(|| TrainError::InsufficientData("inputs without labels".into()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((pred, reference))
}

fn snapshot(vars: &[(String, Var)]) -> Result<Vec<Tensor>, TrainError> {
    Ok(vars
        .iter()
        .map(|(_, v)| v.as_tensor().copy())
        .collect::<candle_core::Result<_>>()?)
}

fn restore(vars: &[(String, Var)], saved: &[Tensor]) -> Result<(), TrainError> {
    for ((_, v), t) in vars.iter().zip(saved) {
        v.set(t)?;
    }
    Ok(())
}

/// Trains the variables selected by `trainable` in place and leaves the
/// best-validation weights loaded. With no validation inputs the training
/// inputs are used for selection.
pub fn fit(
    model: &GlycemicModel,
    train: &[ModelInput],
    val: &[ModelInput],
    config: &TrainConfig,
    trainable: impl Fn(&str) -> bool,
) -> Result<TrainReport, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    if config.batch_size == 0 {
        return Err(TrainError::InsufficientData("batch_size must be positive".into()));
    }
    let val = if val.is_empty() { train } else { val };
    let vars = model.named_vars();
    let train_vars: Vec<Var> = vars
        .iter()
        .filter(|(n, _)| trainable(n))
        .map(|(_, v)| v.clone())
        .collect();
    let mut report = TrainReport::default();
    if train_vars.is_empty() {
        return Ok(report);
    }
    let mut opt = AdamW::new(
        train_vars,
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            ..ParamsAdamW::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut since_best = 0;
    let net = model.net();

    'epochs: for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| report.steps >= m) {
                break;
            }
            let refs: Vec<&ModelInput> = chunk.iter().map(|i| &train[*i]).collect();
            let batch = model.batch(&refs)?;
            let labels = batch
                .labels
                .as_ref()
                .ok_or_else(|| TrainError::InsufficientData("training input without labels".into()))?;
            let ctx = model.context(&batch)?;
            let future_in = if config.scheduled_sampling > 0.0 && rng.gen::<f64>() < config.scheduled_sampling {
                net.generate(&ctx.detach(), &batch.history, (None, None))?.detach()
            } else {
                labels.clone()
            };
            let pred = net.teacher_forced(&ctx, &batch.history, &future_in)?;
            let loss = batch_loss(&pred, labels, config.loss)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    step: report.steps,
                    loss: value,
                });
            }
            opt.backward_step(&loss)?;
            report.steps += 1;
            loss_sum += value;
            batches += 1;
        }
        if batches == 0 {
            break;
        }
        let val_mae = inputs_mae(model, val)?;
        if !val_mae.is_finite() {
            return Err(TrainError::Divergence {
                epoch,
                step: report.steps,
                loss: val_mae,
            });
        }
        report.history.push(EpochRecord {
            epoch,
            steps: report.steps,
            train_loss: loss_sum / batches as f64,
            val_mae,
        });
        debug!(epoch, val_mae, train_loss = loss_sum / batches as f64, "epoch done");
        if best.as_ref().is_none_or(|(b, _, _)| val_mae < *b) {
            best = Some((val_mae, epoch, snapshot(&vars)?));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                report.stopped_early = true;
                break 'epochs;
            }
        }
        if config.max_steps.is_some_and(|m| report.steps >= m) {
            break;
        }
    }
    if let Some((mae, epoch, weights)) = best {
        restore(&vars, &weights)?;
        report.best_val_mae = Some(mae);
        report.best_epoch = Some(epoch);
    }
    info!(steps = report.steps, best = ?report.best_val_mae, "training finished");
    Ok(report)
}

/// Stage one: trains a fresh model on pooled data.
///
/// Normalization statistics come from the training clips only.
pub fn train_foundation(
    data: &DatasetSplit,
    profiles: &BTreeMap<String, PatientProfile>,
    config: &TrainConfig,
    model_config: &ModelConfig,
) -> Result<(GlycemicModel, TrainReport), TrainError> {
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let train = clip_inputs(&data.train, profiles, model_config)?;
    let val = clip_inputs(&data.val, profiles, model_config)?;
    let norm = NormStats::fit(&train, model_config)?;
    let model = GlycemicModel::new(model_config.clone(), norm, config.seed)?;
    let report = fit(&model, &train, &val, config, |_| true)?;
    Ok((model, report))
}

/// Stage two: adapts `base` to one patient's clips under `mode`.
///
/// With at least [`MIN_SPLIT_CLIPS`] clips a validation part is held out
/// for checkpoint selection; otherwise all clips serve both purposes.
pub fn personalize(
    base: &GlycemicModel,
    clips: &[Clip],
    profiles: &BTreeMap<String, PatientProfile>,
    mode: FinetuneMode,
    config: &TrainConfig,
) -> Result<(GlycemicModel, TrainReport), TrainError> {
    if clips.is_empty() {
        return Err(TrainError::InsufficientData("no clips for personalization".into()));
    }
    let (train_clips, val_clips) = if clips.len() >= MIN_SPLIT_CLIPS {
        let s = split(clips, config.seed).map_err(|e| TrainError::InsufficientData(e.to_string()))?;
        let mut val = s.val;
        val.extend(s.test);
        (s.train, val)
    } else {
        (clips.to_vec(), Vec::new())
    };
    let mc = base.config();
    let train = clip_inputs(&train_clips, profiles, mc)?;
    let val = clip_inputs(&val_clips, profiles, mc)?;
    let model = match mode {
        FinetuneMode::Foundation => return Ok((base.try_clone()?, TrainReport::default())),
        FinetuneMode::Single => GlycemicModel::new(mc.clone(), NormStats::fit(&train, mc)?, config.seed)?,
        _ => base.try_clone()?,
    };
    let report = fit(&model, &train, &val, config, |n| mode.trainable(n))?;
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipResult {
    pub clip_id: String,
    pub predicted: Vec<f64>,
    pub reference: Vec<f64>,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub clips: Vec<ClipResult>,
}

/// Autoregressive MAE over `clips` plus per-clip results.
pub fn evaluate(
    model: &GlycemicModel,
    clips: &[Clip],
    profiles: &BTreeMap<String, PatientProfile>,
) -> Result<EvalReport, TrainError> {
    if clips.is_empty() {
        return Err(TrainError::InsufficientData("no clips to evaluate".into()));
    }
    let inputs = clip_inputs(clips, profiles, model.config())?;
    let (pred, reference) = predict_all(model, &inputs)?;
    let mae = mean_absolute_error(&pred, &reference).map_err(|e| TrainError::InsufficientData(e.to_string()))?;
    let clips = clips
        .iter()
        .zip(pred.into_iter().zip(reference))
        .map(|(c, (p, r))| {
            let m = mean_absolute_error(&[&p], &[&r]).expect("equal lengths");
            ClipResult {
                clip_id: c.id(),
                predicted: p,
                reference: r,
                mae: m,
            }
        })
        .collect();
    Ok(EvalReport { mae, clips })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: FeatureGroup,
    pub parameters: usize,
    pub best_val_mae: Option<f64>,
    pub test_mae: f64,
}

/// Trains and evaluates one model per feature group with a shared seed.
/// Test MAE uses the test clips, or the validation clips when the test part
/// is empty.
pub fn ablation_run(
    groups: &[FeatureGroup],
    data: &DatasetSplit,
    profiles: &BTreeMap<String, PatientProfile>,
    config: &TrainConfig,
    base: &ModelConfig,
) -> Result<Vec<AblationRow>, TrainError> {
    let eval_clips = if data.test.is_empty() { &data.val } else { &data.test };
    let eval_clips = if eval_clips.is_empty() { &data.train } else { eval_clips };
    groups
        .iter()
        .map(|g| {
            let mc = ModelConfig {
                feature_group: *g,
                ..base.clone()
            };
            let (model, report) = train_foundation(data, profiles, config, &mc)?;
            let eval = evaluate(&model, eval_clips, profiles)?;
            Ok(AblationRow {
                group: *g,
                parameters: model.parameter_count(),
                best_val_mae: report.best_val_mae,
                test_mae: eval.mae,
            })
        })
        .collect()
}
