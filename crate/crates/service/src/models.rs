use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use diets_core::forecast::GlucoseForecaster;
use diets_core::model::{GlycemicModel, ModelError, Task};
use diets_core::titration::{ModelTitrator, Titrator};

use crate::error::ServiceError;
use crate::store::{file_sha256, CheckpointRefs};

/// Supplies the models used for one patient's session.
pub trait ModelProvider: Send + Sync {
    fn titrator(&self, refs: &CheckpointRefs) -> Result<Arc<dyn Titrator>, ServiceError>;
    fn forecaster(&self, refs: &CheckpointRefs) -> Result<Arc<dyn GlucoseForecaster>, ServiceError>;
    /// Whether default models exist for patients without their own.
    fn has_defaults(&self) -> (bool, bool);
}

/// Fixed models for every patient, mostly for tests and demos.
pub struct StaticModels {
    pub titrator: Arc<dyn Titrator>,
    pub forecaster: Arc<dyn GlucoseForecaster>,
}

impl ModelProvider for StaticModels {
    fn titrator(&self, _: &CheckpointRefs) -> Result<Arc<dyn Titrator>, ServiceError> {
        Ok(self.titrator.clone())
    }

    fn forecaster(&self, _: &CheckpointRefs) -> Result<Arc<dyn GlucoseForecaster>, ServiceError> {
        Ok(self.forecaster.clone())
    }

    fn has_defaults(&self) -> (bool, bool) {
        (true, true)
    }
}

/// Loads checkpoints on first use and keeps them in memory.
pub struct CheckpointModels {
    titration_default: Option<PathBuf>,
    forecast_default: Option<PathBuf>,
    max_bolus_iu: f64,
    cache: Mutex<HashMap<PathBuf, Arc<GlycemicModel>>>,
}

impl CheckpointModels {
    pub fn new(titration_default: Option<PathBuf>, forecast_default: Option<PathBuf>, max_bolus_iu: f64) -> Self {
        CheckpointModels {
            titration_default,
            forecast_default,
            max_bolus_iu,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn load(&self, path: &Path, expected_sha: Option<&str>, task: Task) -> Result<Arc<GlycemicModel>, ServiceError> {
        if let Some(sha) = expected_sha {
            if file_sha256(path)? != sha {
                return Err(ServiceError::Integrity(format!("checkpoint {}", path.display())));
            }
        }
        let mut cache = self.cache.lock().expect("model cache");
        if let Some(m) = cache.get(path) {
            return Ok(m.clone());
        }
        let (model, _) = GlycemicModel::load(path).map_err(|e| ServiceError::Unavailable(format!("{}: {e}", path.display())))?;
        if model.config().task != task {
            return Err(ServiceError::Invalid(format!(
                "{} holds a {:?} model, expected {task:?}",
                path.display(),
                model.config().task
            )));
        }
        let model = Arc::new(model);
        cache.insert(path.to_path_buf(), model.clone());
        Ok(model)
    }

    fn pick<'a>(
        &'a self,
        own: Option<&'a crate::store::CheckpointRef>,
        default: Option<&'a PathBuf>,
    ) -> Result<(PathBuf, Option<&'a str>), ServiceError> {
        match (own, default) {
            (Some(r), _) => Ok((PathBuf::from(&r.path), Some(r.sha256.as_str()))),
            (None, Some(p)) => Ok((p.clone(), None)),
            (None, None) => Err(ServiceError::Unavailable(ModelError::ModelNotLoaded.to_string())),
        }
    }
}

impl ModelProvider for CheckpointModels {
    fn titrator(&self, refs: &CheckpointRefs) -> Result<Arc<dyn Titrator>, ServiceError> {
        let (path, sha) = self.pick(refs.titration.as_ref(), self.titration_default.as_ref())?;
        let model = self.load(&path, sha, Task::Titration)?;
        Ok(Arc::new(SharedTitrator {
            model,
            max_bolus_iu: self.max_bolus_iu,
        }))
    }

    fn forecaster(&self, refs: &CheckpointRefs) -> Result<Arc<dyn GlucoseForecaster>, ServiceError> {
        let (path, sha) = self.pick(refs.forecast.as_ref(), self.forecast_default.as_ref())?;
        Ok(self.load(&path, sha, Task::GlucoseForecast)?)
    }

    fn has_defaults(&self) -> (bool, bool) {
        (self.titration_default.is_some(), self.forecast_default.is_some())
    }
}

struct SharedTitrator {
    model: Arc<GlycemicModel>,
    max_bolus_iu: f64,
}

impl Titrator for SharedTitrator {
    fn recommend(&self, request: &diets_core::titration::TitrationRequest) -> Result<diets_core::titration::InsulinPlan, diets_core::titration::TitrationError> {
        diets_core::titration::recommend(request, &self.model, self.max_bolus_iu)
    }
}

/// Wraps a loaded model for [`StaticModels`].
pub fn titrator_from(model: GlycemicModel, max_bolus_iu: f64) -> Arc<dyn Titrator> {
    Arc::new(ModelTitrator { model, max_bolus_iu })
}
