use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post, put};
use axum::{Json, Router};
use chrono::{NaiveDateTime, Utc};
use diets_core::diet::{NutrientEstimator, NutrientTable};
use diets_core::llm::{BackendConfig, LlmBackend};
use diets_core::model::{GlycemicModel, PatientProfile};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::ServiceConfig;
use crate::error::ServiceError;
use crate::models::{CheckpointModels, ModelProvider};
use crate::session::{self, HorizonData, ReplayReport, SessionRecord, SessionRequest, DISCLAIMER};
use crate::store::{file_sha256, CheckpointRef, CheckpointRefs, FileStore, PatientRecord};

pub struct AppState {
    pub config: ServiceConfig,
    pub store: FileStore,
    pub models: Arc<dyn ModelProvider>,
    pub nutrition: Arc<dyn LlmBackend>,
    pub retitration: Arc<dyn LlmBackend>,
    pub estimator: NutrientEstimator,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl AppState {
    pub fn new(
        config: ServiceConfig,
        models: Arc<dyn ModelProvider>,
        nutrition: Arc<dyn LlmBackend>,
        retitration: Arc<dyn LlmBackend>,
    ) -> Result<Self, ServiceError> {
        let store = FileStore::open(&config.data_dir)?;
        let mut estimator = NutrientEstimator::default();
        if let Some(p) = &config.nutrient_table {
            estimator.table = Some(NutrientTable::load(p).map_err(|e| ServiceError::Config(e.to_string()))?);
        }
        Ok(AppState {
            config,
            store,
            models,
            nutrition,
            retitration,
            estimator,
            locks: Mutex::new(HashMap::new()),
        })
    }

    /// Builds backends and model loaders from the config. Call this outside
    /// any async runtime; the HTTP backend owns a blocking client.
    pub fn from_config(config: ServiceConfig) -> Result<Self, ServiceError> {
        let backend_config = match &config.backend_config {
            Some(p) => BackendConfig::load(p).map_err(|e| ServiceError::Config(e.to_string()))?,
            None => BackendConfig::default(),
        };
        let backend: Arc<dyn LlmBackend> = Arc::from(backend_config.build().map_err(|e| ServiceError::Config(e.to_string()))?);
        let models = Arc::new(CheckpointModels::new(
            config.titration_checkpoint.clone(),
            config.forecast_checkpoint.clone(),
            config.max_bolus_iu,
        ));
        let mut state = Self::new(config, models, backend.clone(), backend)?;
        state.estimator.retries = backend_config.max_retries;
        Ok(state)
    }

    /// Serializes sessions of one patient.
    pub fn patient_lock(&self, id: &str) -> Arc<Mutex<()>> {
        self.locks.lock().expect("lock map").entry(id.to_string()).or_default().clone()
    }
}

fn now() -> NaiveDateTime {
    Utc::now().naive_utc()
}

async fn blocking<T, F>(state: &Arc<AppState>, f: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> Result<T, ServiceError> + Send + 'static,
{
    let state = state.clone();
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ServiceError::Internal(format!("worker: {e}")))?
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NewPatient {
    pub external_id: String,
    pub profile: PatientProfile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientView {
    #[serde(flatten)]
    pub patient: PatientRecord,
    pub checkpoints: CheckpointRefs,
    pub disclaimer: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CheckpointPaths {
    #[serde(default)]
    pub titration_path: Option<PathBuf>,
    #[serde(default)]
    pub forecast_path: Option<PathBuf>,
}

fn check_profile(p: &PatientProfile) -> Result<(), ServiceError> {
    p.validate().map_err(|e| ServiceError::Invalid(e.to_string()))
}

fn view(state: &AppState, patient: PatientRecord) -> Result<PatientView, ServiceError> {
    let checkpoints = state.store.checkpoints(&patient.patient_id)?;
    Ok(PatientView {
        patient,
        checkpoints,
        disclaimer: DISCLAIMER.into(),
    })
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    let (titration, forecast) = state.models.has_defaults();
    Json(json!({
        "status": "ok",
        "default_titration_model": titration,
        "default_forecast_model": forecast,
        "nutrient_backend": state.nutrition.name(),
        "disclaimer": DISCLAIMER,
    }))
}

async fn create_patient(
    State(state): State<Arc<AppState>>,
    Json(body): Json<NewPatient>,
) -> Result<(StatusCode, Json<PatientView>), ServiceError> {
    check_profile(&body.profile)?;
    if body.external_id.trim().is_empty() {
        return Err(ServiceError::Invalid("external_id is empty".into()));
    }
    let v = blocking(&state, move |s| {
        let p = s.store.create_patient(&body.external_id, body.profile, now())?;
        view(s, p)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(v)))
}

async fn get_patient(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<PatientView>, ServiceError> {
    blocking(&state, move |s| view(s, s.store.patient(&id)?)).await.map(Json)
}

async fn update_profile(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(profile): Json<PatientProfile>,
) -> Result<Json<PatientView>, ServiceError> {
    check_profile(&profile)?;
    blocking(&state, move |s| view(s, s.store.update_profile(&id, profile, now())?)).await.map(Json)
}

async fn patient_versions(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<Vec<PatientRecord>>, ServiceError> {
    blocking(&state, move |s| s.store.patient_history(&id)).await.map(Json)
}

async fn register_checkpoints(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<CheckpointPaths>,
) -> Result<Json<CheckpointRefs>, ServiceError> {
    blocking(&state, move |s| {
        s.store.patient(&id)?;
        let mut refs = CheckpointRefs::default();
        for (path, slot, task) in [
            (body.titration_path, &mut refs.titration, diets_core::model::Task::Titration),
            (body.forecast_path, &mut refs.forecast, diets_core::model::Task::GlucoseForecast),
        ] {
            if let Some(p) = path {
                let (model, _) = GlycemicModel::load(&p).map_err(|e| ServiceError::Invalid(format!("{}: {e}", p.display())))?;
                if model.config().task != task {
                    return Err(ServiceError::Invalid(format!("{} is not a {task:?} checkpoint", p.display())));
                }
                *slot = Some(CheckpointRef {
                    sha256: file_sha256(&p)?,
                    path: p.to_string_lossy().into_owned(),
                });
            }
        }
        s.store.register_checkpoints(&id, refs)
    })
    .await
    .map(Json)
}

async fn put_history(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(data): Json<HorizonData>,
) -> Result<StatusCode, ServiceError> {
    blocking(&state, move |s| {
        let patient = s.store.patient(&id)?;
        let context = diets_core::context::GlycemicContext {
            patient_id: patient.patient_id,
            issued_at: data.issued_at,
            history: data.history,
            basal_history_iu: data.basal_history_iu,
            profile: Some(patient.profile),
            horizon: data.horizon,
        };
        let n = context.history.glucose_mg_dl.len();
        context
            .validate(n, context.horizon.len())
            .map_err(|e| ServiceError::Invalid(e.to_string()))?;
        s.store.save_history(&id, &context)
    })
    .await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(body): Json<SessionRequest>,
) -> Result<Json<SessionRecord>, ServiceError> {
    blocking(&state, move |s| session::run_session(s, body, now())).await.map(Json)
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionRecord>, ServiceError> {
    blocking(&state, move |s| s.store.session(&id)).await.map(Json)
}

async fn replay(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<ReplayReport>, ServiceError> {
    blocking(&state, move |s| session::replay_session(s, &id)).await.map(Json)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/patients", post(create_patient))
        .route("/patients/{id}", get(get_patient).put(update_profile))
        .route("/patients/{id}/versions", get(patient_versions))
        .route("/patients/{id}/checkpoints", put(register_checkpoints))
        .route("/patients/{id}/history", put(put_history))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/replay", get(replay))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(&state.config.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}
