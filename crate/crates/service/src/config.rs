use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

/// Service settings from a TOML file, then `DIETS_*` environment overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub data_dir: PathBuf,
    /// Foundation titration checkpoint used when a patient has none.
    pub titration_checkpoint: Option<PathBuf>,
    pub forecast_checkpoint: Option<PathBuf>,
    /// Backend config for nutrient estimation and re-titration.
    pub backend_config: Option<PathBuf>,
    /// Nutrient CSV replacing the bundled table.
    pub nutrient_table: Option<PathBuf>,
    pub max_iters: usize,
    pub max_bolus_iu: f64,
    /// Re-titrate with the titration model instead of the language model.
    pub model_retitration: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("diets-data"),
            titration_checkpoint: None,
            forecast_checkpoint: None,
            backend_config: None,
            nutrient_table: None,
            max_iters: 5,
            max_bolus_iu: diets_core::titration::DEFAULT_MAX_BOLUS_IU,
            model_retitration: false,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Applies overrides from `vars`, typically `std::env::vars()`.
    pub fn with_env(mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self, ServiceError> {
        for (k, v) in vars {
            let bad = |what: &str| ServiceError::Config(format!("{k}={v:?} is not a valid {what}"));
            match k.as_str() {
                "DIETS_BIND" => self.bind = v,
                "DIETS_PORT" => {
                    let port: u16 = v.parse().map_err(|_| bad("port"))?;
                    let host = self.bind.rsplit_once(':').map_or("127.0.0.1", |(h, _)| h).to_string();
                    self.bind = format!("{host}:{port}");
                }
                "DIETS_DATA_DIR" => self.data_dir = v.into(),
                "DIETS_TITRATION_CHECKPOINT" => self.titration_checkpoint = Some(v.into()),
                "DIETS_FORECAST_CHECKPOINT" => self.forecast_checkpoint = Some(v.into()),
                "DIETS_BACKEND_CONFIG" => self.backend_config = Some(v.into()),
                "DIETS_NUTRIENT_TABLE" => self.nutrient_table = Some(v.into()),
                "DIETS_MAX_ITERS" => self.max_iters = v.parse().map_err(|_| bad("iteration count"))?,
                "DIETS_MAX_BOLUS_IU" => self.max_bolus_iu = v.parse().map_err(|_| bad("dose"))?,
                "DIETS_MODEL_RETITRATION" => self.model_retitration = matches!(v.as_str(), "1" | "true" | "yes"),
                _ => {}
            }
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_file() {
        let cfg = ServiceConfig::from_toml_str("bind = \"0.0.0.0:9000\"\nmax_iters = 3\n").unwrap();
        assert_eq!(cfg.max_iters, 3);
        let cfg = cfg
            .with_env([
                ("DIETS_PORT".to_string(), "7000".to_string()),
                ("DIETS_MAX_ITERS".to_string(), "4".to_string()),
                ("HOME".to_string(), "/x".to_string()),
            ])
            .unwrap();
        assert_eq!(cfg.bind, "0.0.0.0:7000");
        assert_eq!(cfg.max_iters, 4);
        assert!(cfg
            .with_env([("DIETS_PORT".to_string(), "x".to_string())])
            .is_err());
    }
}
