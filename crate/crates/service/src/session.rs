//! One request through nutrients, titration and the guard loop.

use chrono::NaiveDateTime;
use diets_core::context::{GlycemicContext, Horizon, SlotHistory};
use diets_core::diet::{DietError, MealDescription, NutrientEstimate, NutrientSource};
use diets_core::forecast::{ForecastError, GlucoseForecaster, GlucoseTrace};
use diets_core::model::ModelError;
use diets_core::safety::{
    guard, replay_backend, GuardConfig, GuardInput, GuardIteration, GuardOutcome, LlmRetitrator, ModelRetitrator, RiskAssessment,
    SafetyError,
};
use diets_core::titration::{InsulinPlan, TargetSpec, TitrationError, TitrationRequest, Titrator};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::AppState;

pub const DISCLAIMER: &str =
    "Research software. Not a medical device and not for clinical use; do not dose insulin from this output.";

/// The patient's recent record and plans for the next slots, without
/// identity or profile (those come from the store).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonData {
    pub issued_at: NaiveDateTime,
    pub history: SlotHistory,
    #[serde(default)]
    pub basal_history_iu: Option<Vec<f64>>,
    pub horizon: Horizon,
}

impl HorizonData {
    pub fn from_context(c: &GlycemicContext) -> Self {
        HorizonData {
            issued_at: c.issued_at,
            history: c.history.clone(),
            basal_history_iu: c.basal_history_iu.clone(),
            horizon: c.horizon.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRequest {
    pub patient_id: String,
    pub meal_text: String,
    /// Constant target; use `target` for endpoints or a full trace.
    #[serde(default)]
    pub target_glucose_mg_dl: Option<f64>,
    #[serde(default)]
    pub target: Option<TargetSpec>,
    /// Recent data; the patient's stored buffer is used when absent.
    #[serde(default)]
    pub data: Option<HorizonData>,
    /// Future slot the meal is eaten in.
    #[serde(default)]
    pub meal_slot: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetitrationStrategy {
    Llm,
    TitrationModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub patient_id: String,
    pub patient_version: u32,
    pub created_at: NaiveDateTime,
    pub meal_text: String,
    pub nutrients: NutrientEstimate,
    pub notes: Vec<String>,
    pub titration_request: TitrationRequest,
    pub strategy: RetitrationStrategy,
    pub guard_config: GuardConfig,
    pub initial_plan: InsulinPlan,
    pub plan: InsulinPlan,
    pub trace: GlucoseTrace,
    pub risk_history: Vec<RiskAssessment>,
    pub iterations: Vec<GuardIteration>,
    pub selected_iteration: usize,
    pub diagnostics: Vec<String>,
    pub disclaimer: String,
}

impl SessionRecord {
    pub fn outcome(&self) -> GuardOutcome {
        GuardOutcome {
            initial_plan: self.initial_plan.clone(),
            plan: self.plan.clone(),
            final_trace: self.trace.clone(),
            iterations: self.iterations.clone(),
            selected_iteration: self.selected_iteration,
            diagnostics: self.diagnostics.clone(),
        }
    }
}

fn diet_error(e: DietError) -> ServiceError {
    match e {
        DietError::EmptyMeal | DietError::NoMatch(_) => ServiceError::Invalid(e.to_string()),
        DietError::BackendUnavailable(_) => ServiceError::Unavailable(e.to_string()),
        other => ServiceError::Internal(other.to_string()),
    }
}

fn titration_error(e: TitrationError) -> ServiceError {
    match e {
        TitrationError::TargetOutOfRange(_) | TitrationError::InvalidTarget(_) => ServiceError::Invalid(e.to_string()),
        TitrationError::Model(ModelError::ModelNotLoaded) => ServiceError::Unavailable(e.to_string()),
        TitrationError::Model(
            ModelError::ShapeMismatch(_) | ModelError::FeatureGroupMismatch(_) | ModelError::UnencodableField(_),
        ) => ServiceError::Invalid(e.to_string()),
        other => ServiceError::Internal(other.to_string()),
    }
}

fn safety_error(e: SafetyError) -> ServiceError {
    match e {
        SafetyError::Forecast(ForecastError::Model(ModelError::ModelNotLoaded)) => ServiceError::Unavailable(e.to_string()),
        SafetyError::Forecast(ForecastError::Model(ModelError::ShapeMismatch(_) | ModelError::FeatureGroupMismatch(_))) => {
            ServiceError::Invalid(e.to_string())
        }
        other => ServiceError::Internal(other.to_string()),
    }
}

fn run_guard(
    state: &AppState,
    strategy: RetitrationStrategy,
    plan: InsulinPlan,
    request: &TitrationRequest,
    intake: &str,
    titrator: &dyn Titrator,
    forecaster: &dyn GlucoseForecaster,
    config: &GuardConfig,
    llm_replay: Option<&GuardOutcome>,
) -> Result<GuardOutcome, ServiceError> {
    let input = GuardInput {
        context: &request.context,
        recent_intake: intake,
    };
    let audit = diets_core::audit::NullAudit;
    let result = match (strategy, llm_replay) {
        (RetitrationStrategy::TitrationModel, _) => {
            let re = ModelRetitrator::new(titrator, request.clone(), 20.0);
            guard(plan, &input, forecaster, &re, config, &audit)
        }
        (RetitrationStrategy::Llm, Some(recorded)) => {
            let re = LlmRetitrator {
                backend: replay_backend(recorded),
            };
            guard(plan, &input, forecaster, &re, config, &audit)
        }
        (RetitrationStrategy::Llm, None) => {
            let re = LlmRetitrator {
                backend: state.retitration.clone(),
            };
            guard(plan, &input, forecaster, &re, config, &audit)
        }
    };
    result.map_err(safety_error)
}

fn intake_summary(meal: &str, n: &NutrientEstimate) -> String {
    format!(
        "{meal} (about {:.0} g carbohydrate, {:.0} g protein, {:.0} g fat, {:.0} cal)",
        n.carbohydrate_g, n.protein_g, n.fat_g, n.calories_cal
    )
}

/// Runs the full workflow and stores the session.
pub fn run_session(state: &AppState, req: SessionRequest, now: NaiveDateTime) -> Result<SessionRecord, ServiceError> {
    let patient = state.store.patient(&req.patient_id)?;
    let lock = state.patient_lock(&patient.patient_id);
    let _serial = lock.lock().expect("patient lock");
    let data = match req.data {
        Some(d) => d,
        None => state
            .store
            .history(&patient.patient_id)?
            .map(|c| HorizonData::from_context(&c))
            .ok_or_else(|| ServiceError::Invalid("no recent data in the request and none stored for this patient".into()))?,
    };
    let target = match (req.target_glucose_mg_dl, req.target) {
        (Some(g), None) => TargetSpec::constant(g),
        (None, Some(t)) => t,
        _ => return Err(ServiceError::Invalid("give exactly one of target_glucose_mg_dl and target".into())),
    };
    let mut context = GlycemicContext {
        patient_id: patient.patient_id.clone(),
        issued_at: data.issued_at,
        history: data.history,
        basal_history_iu: data.basal_history_iu,
        profile: Some(patient.profile.clone()),
        horizon: data.horizon,
    };
    if req.meal_slot >= context.horizon.len().max(1) {
        return Err(ServiceError::Invalid(format!("meal_slot {} is outside the horizon", req.meal_slot)));
    }
    let refs = state.store.checkpoints(&patient.patient_id)?;
    let titrator = state.models.titrator(&refs)?;
    let forecaster = state.models.forecaster(&refs)?;

    let meal = MealDescription::new(&req.meal_text);
    let nutrients = state
        .estimator
        .estimate(&meal, state.nutrition.as_ref())
        .map_err(diet_error)?;
    let mut notes = Vec::new();
    if nutrients.source == NutrientSource::OfflineTable {
        notes.push("nutrient backend unavailable or unusable; estimate taken from the offline nutrient table".to_string());
    }
    if !context.horizon.is_empty() {
        context.horizon.add_meal(req.meal_slot, &nutrients);
    }
    state.store.save_history(&patient.patient_id, &context)?;

    let request = TitrationRequest { context, target };
    let initial = titrator.recommend(&request).map_err(titration_error)?;
    let strategy = if state.config.model_retitration {
        RetitrationStrategy::TitrationModel
    } else {
        RetitrationStrategy::Llm
    };
    let guard_config = GuardConfig {
        max_iters: state.config.max_iters,
        max_bolus_iu: state.config.max_bolus_iu,
        ..GuardConfig::default()
    };
    let intake = intake_summary(&req.meal_text, &nutrients);
    let outcome = run_guard(
        state,
        strategy,
        initial,
        &request,
        &intake,
        titrator.as_ref(),
        forecaster.as_ref(),
        &guard_config,
        None,
    )?;
    let record = SessionRecord {
        session_id: uuid::Uuid::new_v4().to_string(),
        patient_id: patient.patient_id.clone(),
        patient_version: patient.version,
        created_at: now,
        meal_text: req.meal_text,
        nutrients,
        notes,
        titration_request: request,
        strategy,
        guard_config,
        initial_plan: outcome.initial_plan.clone(),
        plan: outcome.plan.clone(),
        trace: outcome.final_trace.clone(),
        risk_history: outcome.risk_history(),
        iterations: outcome.iterations.clone(),
        selected_iteration: outcome.selected_iteration,
        diagnostics: outcome.diagnostics.clone(),
        disclaimer: DISCLAIMER.to_string(),
    };
    debug_assert_ne!(record.plan.safety_status, diets_core::titration::SafetyStatus::Unchecked);
    state.store.put_session(&record)?;
    tracing::info!(session = %record.session_id, status = %record.plan.safety_status, "session stored");
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub session_id: String,
    pub matches: bool,
    pub replayed: GuardOutcome,
}

/// Re-runs the guard loop from a stored session with its recorded
/// re-titration replies and the patient's current models.
pub fn replay_session(state: &AppState, id: &str) -> Result<ReplayReport, ServiceError> {
    let record = state.store.session(id)?;
    let refs = state.store.checkpoints(&record.patient_id)?;
    let titrator = state.models.titrator(&refs)?;
    let forecaster = state.models.forecaster(&refs)?;
    let recorded = record.outcome();
    let intake = intake_summary(&record.meal_text, &record.nutrients);
    let replayed = run_guard(
        state,
        record.strategy,
        record.initial_plan.clone(),
        &record.titration_request,
        &intake,
        titrator.as_ref(),
        forecaster.as_ref(),
        &record.guard_config,
        Some(&recorded),
    )?;
    Ok(ReplayReport {
        session_id: record.session_id,
        matches: replayed == recorded,
        replayed,
    })
}
