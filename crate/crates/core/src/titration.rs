//! Bolus plans from the titration model.

use std::fmt;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{AuditEntry, AuditError, AuditSink};
use crate::context::GlycemicContext;
use crate::metrics::{mean_absolute_error, MetricError};
use crate::model::{GlycemicModel, ModelError, Task};

/// Exclusive sanity bounds for target glucose, mg/dl.
pub const TARGET_BOUNDS_MG_DL: (f64, f64) = (40.0, 400.0);
/// Default cap on any single 15-minute bolus, IU.
pub const DEFAULT_MAX_BOLUS_IU: f64 = 25.0;

#[derive(Debug, Error)]
pub enum TitrationError {
    #[error("target glucose {0} mg/dl outside ({lo}, {hi})", lo = TARGET_BOUNDS_MG_DL.0, hi = TARGET_BOUNDS_MG_DL.1)]
    TargetOutOfRange(f64),
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("model decodes {0:?}, not bolus insulin")]
    WrongTask(Task),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

/// How the user states the desired glucose for the next two hours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSpec {
    /// One value held over every future slot.
    Constant { glucose_mg_dl: f64 },
    /// First and last slot; the slots between are linear.
    Endpoints { start_mg_dl: f64, end_mg_dl: f64 },
    /// One value per future slot.
    Trace { glucose_mg_dl: Vec<f64> },
}

impl TargetSpec {
    pub fn constant(glucose_mg_dl: f64) -> Self {
        TargetSpec::Constant { glucose_mg_dl }
    }

    /// Expands to `len` slots and checks the sanity bounds.
    pub fn resolve(&self, len: usize) -> Result<Vec<f64>, TitrationError> {
        let trace = match self {
            TargetSpec::Constant { glucose_mg_dl } => vec![*glucose_mg_dl; len],
            TargetSpec::Endpoints { start_mg_dl, end_mg_dl } => {
                if len < 2 {
                    vec![*start_mg_dl; len]
                } else {
                    (0..len)
                        .map(|i| start_mg_dl + (end_mg_dl - start_mg_dl) * i as f64 / (len - 1) as f64)
                        .collect()
                }
            }
            TargetSpec::Trace { glucose_mg_dl } => {
                if glucose_mg_dl.len() != len {
                    return Err(TitrationError::InvalidTarget(format!(
                        "trace has {} slots, expected {len}",
                        glucose_mg_dl.len()
                    )));
                }
                glucose_mg_dl.clone()
            }
        };
        let (lo, hi) = TARGET_BOUNDS_MG_DL;
        match trace.iter().find(|v| !(v.is_finite() && **v > lo && **v < hi)) {
            Some(bad) => Err(TitrationError::TargetOutOfRange(*bad)),
            None => Ok(trace),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TitrationRequest {
    pub context: GlycemicContext,
    pub target: TargetSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyStatus {
    Unchecked,
    Safe,
    Flagged,
}

impl fmt::Display for SafetyStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SafetyStatus::Unchecked => "unchecked",
            SafetyStatus::Safe => "safe",
            SafetyStatus::Flagged => "flagged",
        })
    }
}

/// Bolus doses for the next future slots, one per 15 minutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsulinPlan {
    pub doses_iu: Vec<f64>,
    pub created_at: NaiveDateTime,
    pub safety_status: SafetyStatus,
    pub retitration_count: usize,
}

impl InsulinPlan {
    pub fn unchecked(doses_iu: Vec<f64>, created_at: NaiveDateTime) -> Self {
        InsulinPlan {
            doses_iu,
            created_at,
            safety_status: SafetyStatus::Unchecked,
            retitration_count: 0,
        }
    }

    /// Doses rounded to 0.01 IU for display.
    pub fn display_doses(&self) -> Vec<f64> {
        self.doses_iu.iter().map(|d| (d * 100.0).round() / 100.0).collect()
    }

    pub fn total_iu(&self) -> f64 {
        self.doses_iu.iter().sum()
    }
}

/// Anything that turns a request into an unchecked plan.
pub trait Titrator: Send + Sync {
    fn recommend(&self, request: &TitrationRequest) -> Result<InsulinPlan, TitrationError>;
}

impl<T: Titrator + ?Sized> Titrator for &T {
    fn recommend(&self, request: &TitrationRequest) -> Result<InsulinPlan, TitrationError> {
        (**self).recommend(request)
    }
}

impl<T: Titrator + ?Sized> Titrator for std::sync::Arc<T> {
    fn recommend(&self, request: &TitrationRequest) -> Result<InsulinPlan, TitrationError> {
        (**self).recommend(request)
    }
}

/// A titration model with its dose cap.
pub struct ModelTitrator {
    pub model: GlycemicModel,
    pub max_bolus_iu: f64,
}

impl ModelTitrator {
    pub fn new(model: GlycemicModel) -> Self {
        ModelTitrator {
            model,
            max_bolus_iu: DEFAULT_MAX_BOLUS_IU,
        }
    }
}

impl Titrator for ModelTitrator {
    fn recommend(&self, request: &TitrationRequest) -> Result<InsulinPlan, TitrationError> {
        recommend(request, &self.model, self.max_bolus_iu)
    }
}

/// Decodes a plan with every dose in `[0, max_bolus_iu]`.
pub fn recommend(request: &TitrationRequest, model: &GlycemicModel, max_bolus_iu: f64) -> Result<InsulinPlan, TitrationError> {
    let config = model.config();
    if config.task != Task::Titration {
        return Err(TitrationError::WrongTask(config.task));
    }
    let target = request.target.resolve(config.future_len)?;
    let input = request.context.model_input(config, &target)?;
    let doses = model
        .predict_bounded(std::slice::from_ref(&input), (Some(0.0), Some(max_bolus_iu)))?
        .remove(0);
    tracing::info!(patient = %request.context.patient_id, total_iu = doses.iter().sum::<f64>(), "plan decoded");
    Ok(InsulinPlan::unchecked(doses, request.context.issued_at))
}

/// [`Titrator::recommend`] followed by an audit entry for the plan.
pub fn recommend_audited(
    titrator: &dyn Titrator,
    request: &TitrationRequest,
    audit: &dyn AuditSink,
) -> Result<InsulinPlan, TitrationError> {
    let plan = titrator.recommend(request)?;
    audit.append(&AuditEntry::recommendation(&request.context.patient_id, &plan))?;
    Ok(plan)
}

/// MAE in IU over all dose slots of paired plans.
pub fn titration_mae(predicted: &[InsulinPlan], reference: &[InsulinPlan]) -> Result<f64, MetricError> {
    let p: Vec<&[f64]> = predicted.iter().map(|p| p.doses_iu.as_slice()).collect();
    let r: Vec<&[f64]> = reference.iter().map(|p| p.doses_iu.as_slice()).collect();
    mean_absolute_error(&p, &r)
}
