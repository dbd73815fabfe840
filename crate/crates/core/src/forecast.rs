//! Glucose forecasts for a candidate bolus plan.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::GlycemicContext;
use crate::metrics::{mean_absolute_error, MetricError};
use crate::model::{GlycemicModel, ModelError, Task};

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("model decodes {0:?}, not glucose")]
    WrongTask(Task),
    #[error("candidate plan has {got} doses, expected {expected}")]
    PlanLength { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRequest {
    pub context: GlycemicContext,
    /// Candidate bolus doses for the future slots.
    pub plan_iu: Vec<f64>,
}

/// Predicted glucose for the future slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlucoseTrace {
    pub glucose_mg_dl: Vec<f64>,
}

impl GlucoseTrace {
    pub fn new(glucose_mg_dl: Vec<f64>) -> Self {
        GlucoseTrace { glucose_mg_dl }
    }

    pub fn len(&self) -> usize {
        self.glucose_mg_dl.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glucose_mg_dl.is_empty()
    }
}

pub trait GlucoseForecaster: Send + Sync {
    fn forecast(&self, request: &ForecastRequest) -> Result<GlucoseTrace, ForecastError>;
}

impl GlucoseForecaster for GlycemicModel {
    fn forecast(&self, request: &ForecastRequest) -> Result<GlucoseTrace, ForecastError> {
        forecast(request, self)
    }
}

/// Autoregressive glucose forecast with the plan in the future bolus slots.
pub fn forecast(request: &ForecastRequest, model: &GlycemicModel) -> Result<GlucoseTrace, ForecastError> {
    let config = model.config();
    if config.task != Task::GlucoseForecast {
        return Err(ForecastError::WrongTask(config.task));
    }
    if request.plan_iu.len() != config.future_len {
        return Err(ForecastError::PlanLength {
            expected: config.future_len,
            got: request.plan_iu.len(),
        });
    }
    let input = request.context.model_input(config, &request.plan_iu)?;
    Ok(GlucoseTrace::new(model.predict_one(&input)?))
}

/// MAE in mg/dl over all slots of paired traces.
pub fn glucose_mae(predicted: &[GlucoseTrace], reference: &[GlucoseTrace]) -> Result<f64, MetricError> {
    let p: Vec<&[f64]> = predicted.iter().map(|t| t.glucose_mg_dl.as_slice()).collect();
    let r: Vec<&[f64]> = reference.iter().map(|t| t.glucose_mg_dl.as_slice()).collect();
    mean_absolute_error(&p, &r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_cases() {
        let a = GlucoseTrace::new(vec![100.0; 8]);
        let b = GlucoseTrace::new(vec![102.0; 8]);
        assert_eq!(glucose_mae(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        assert_eq!(glucose_mae(&[a], &[b]).unwrap(), 2.0);
    }
}
