use std::path::{Path, PathBuf};

use diets_core::model::{FeatureGroup, ModelConfig, Task};
use diets_core::training::TrainConfig;
use diets_service::ServiceConfig;
use serde::{Deserialize, Serialize};

use crate::error::{user, CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelSize {
    #[default]
    Full,
    /// The small test configuration; trains in seconds.
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub size: ModelSize,
    pub titration_group: FeatureGroup,
    pub forecast_group: FeatureGroup,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            size: ModelSize::Full,
            titration_group: FeatureGroup::TITRATION_DEFAULT,
            forecast_group: FeatureGroup::FORECAST_DEFAULT,
        }
    }
}

impl ModelSection {
    pub fn config(&self, task: Task, group: Option<FeatureGroup>) -> ModelConfig {
        let group = group.unwrap_or(match task {
            Task::Titration => self.titration_group,
            Task::GlucoseForecast => self.forecast_group,
        });
        let base = match (self.size, task) {
            (ModelSize::Tiny, _) => ModelConfig::tiny(task, group),
            (ModelSize::Full, Task::Titration) => ModelConfig::titration(),
            (ModelSize::Full, Task::GlucoseForecast) => ModelConfig::glucose(),
        };
        ModelConfig {
            feature_group: group,
            ..base
        }
    }
}

/// Settings shared by all subcommands, from `--config` plus global flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CliConfig {
    /// Directory of canonical patient CSVs and profile sidecars.
    pub dataset: Option<PathBuf>,
    pub titration_checkpoint: Option<PathBuf>,
    pub forecast_checkpoint: Option<PathBuf>,
    /// Language-model backend config; offline when absent.
    pub backend_config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub stride: usize,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub service: ServiceConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            dataset: None,
            titration_checkpoint: None,
            forecast_checkpoint: None,
            backend_config: None,
            out: PathBuf::from("out"),
            seed: 0,
            stride: 1,
            model: ModelSection::default(),
            train: TrainConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

impl CliConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::User(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.resolve_relative(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Paths in a config file are relative to the file.
    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.dataset,
            &mut self.titration_checkpoint,
            &mut self.forecast_checkpoint,
            &mut self.backend_config,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.out);
    }

    /// Applies `--seed` and `--out`.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        if let Some(o) = out {
            self.out = o;
        }
        self
    }

    pub fn window(&self) -> Result<diets_core::pipeline::WindowConfig> {
        let mut w = diets_core::pipeline::WindowConfig::default();
        w.stride = self.stride;
        w.validate().map_err(user)?;
        Ok(w)
    }
}

/// Fails unless `path` exists; `what` names it in the message.
pub fn require_path<'a>(path: Option<&'a PathBuf>, what: &str) -> Result<&'a Path> {
    let p = path.ok_or_else(|| CliError::User(format!("no {what} given (flag or config)")))?;
    if !p.exists() {
        return Err(CliError::User(format!("{what} {} does not exist", p.display())));
    }
    Ok(p)
}
