//! Meal description to nutrient estimate.
//!
//! The primary route renders a six-section prompt, sends it to an
//! [`LlmBackend`](crate::llm::LlmBackend) and parses the structured block in
//! the reply. Unparseable replies are retried; when retries run out the
//! bundled per-100 g table takes over.

mod parse;
mod prompt;
mod table;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::llm::{BackendError, LlmBackend};
use crate::metrics::population_variance;

pub use parse::{parse_response, render_estimate};
pub use prompt::{build_prompt, PromptTemplate, SECTION_NAMES};
pub use table::{offline_estimate, FoodEntry, NutrientTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DietError {
    #[error("meal description is empty")]
    EmptyMeal,
    #[error("invalid prompt template: {0}")]
    InvalidTemplate(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("no food in {0:?} matches the nutrient table")]
    NoMatch(String),
    #[error("nutrient table: {0}")]
    Table(String),
    #[error("backend unavailable and offline fallback failed: {0}")]
    BackendUnavailable(String),
    #[error("stability evaluation needs at least 2 runs, got {0}")]
    TooFewRuns(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MealDescription {
    pub text: String,
    #[serde(default)]
    pub eaten_at: Option<NaiveDateTime>,
    #[serde(default)]
    pub portion_hint: Option<String>,
}

impl MealDescription {
    pub fn new(text: &str) -> Self {
        MealDescription {
            text: text.to_string(),
            eaten_at: None,
            portion_hint: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NutrientSource {
    Llm,
    OfflineTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NutrientEstimate {
    pub carbohydrate_g: f64,
    pub protein_g: f64,
    pub fat_g: f64,
    pub calories_cal: f64,
    pub source: NutrientSource,
    pub raw_response: String,
}

impl NutrientEstimate {
    pub fn zero(source: NutrientSource) -> Self {
        NutrientEstimate {
            carbohydrate_g: 0.0,
            protein_g: 0.0,
            fat_g: 0.0,
            calories_cal: 0.0,
            source,
            raw_response: String::new(),
        }
    }

    pub fn values(&self) -> [f64; 4] {
        [self.carbohydrate_g, self.protein_g, self.fat_g, self.calories_cal]
    }
}

/// Prompt, retry budget and fallback table bundled together.
#[derive(Debug, Clone)]
pub struct NutrientEstimator {
    pub template: PromptTemplate,
    pub table: Option<NutrientTable>,
    pub retries: usize,
}

impl Default for NutrientEstimator {
    fn default() -> Self {
        NutrientEstimator {
            template: PromptTemplate::default(),
            table: Some(NutrientTable::bundled()),
            retries: 2,
        }
    }
}

impl NutrientEstimator {
    /// Queries `backend` up to `retries + 1` times and returns the first
    /// parseable answer, falling back to the offline table.
    pub fn estimate(&self, meal: &MealDescription, backend: &dyn LlmBackend) -> Result<NutrientEstimate, DietError> {
        let prompt = build_prompt(meal, &self.template)?;
        let mut failures = Vec::new();
        for attempt in 0..=self.retries {
            match backend.complete(&prompt) {
                Ok(text) => match parse_response(&text) {
                    Ok(est) => return Ok(est),
                    Err(e) => {
                        warn!(attempt, error = %e, "unparseable nutrient response");
                        failures.push(e.to_string());
                    }
                },
                Err(e) => {
                    warn!(attempt, error = %e, "nutrient backend call failed");
                    failures.push(e.to_string());
                }
            }
        }
        let Some(table) = &self.table else {
            return Err(DietError::BackendUnavailable(format!(
                "{}; no offline table configured",
                failures.join("; ")
            )));
        };
        match offline_estimate(meal, table) {
            Ok(mut est) => {
                est.raw_response = format!("{}\nbackend failures: {}", est.raw_response, failures.join("; "));
                Ok(est)
            }
            Err(e) => Err(DietError::BackendUnavailable(format!("{}; offline: {e}", failures.join("; ")))),
        }
    }

    /// Population variance of each nutrient across `runs` repeated queries.
    pub fn stability(&self, meal: &MealDescription, backend: &dyn LlmBackend, runs: usize) -> Result<NutrientVariance, DietError> {
        if runs < 2 {
            return Err(DietError::TooFewRuns(runs));
        }
        let samples = (0..runs)
            .map(|_| self.estimate(meal, backend))
            .collect::<Result<Vec<_>, _>>()?;
        let var = |f: fn(&NutrientEstimate) -> f64| {
            let xs: Vec<f64> = samples.iter().map(f).collect();
            population_variance(&xs).expect("runs >= 2")
        };
        Ok(NutrientVariance {
            carbohydrate_g: var(|e| e.carbohydrate_g),
            protein_g: var(|e| e.protein_g),
            fat_g: var(|e| e.fat_g),
            calories_cal: var(|e| e.calories_cal),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NutrientVariance {
    pub carbohydrate_g: f64,
    pub protein_g: f64,
    pub fat_g: f64,
    pub calories_cal: f64,
}

/// [`NutrientEstimator::estimate`] with the default template and bundled table.
pub fn estimate_nutrients(
    meal: &MealDescription,
    backend: &dyn LlmBackend,
    retries: usize,
) -> Result<NutrientEstimate, DietError> {
    NutrientEstimator {
        retries,
        ..NutrientEstimator::default()
    }
    .estimate(meal, backend)
}

/// [`NutrientEstimator::stability`] with default settings.
pub fn stability_eval(meal: &MealDescription, backend: &dyn LlmBackend, runs: usize) -> Result<NutrientVariance, DietError> {
    NutrientEstimator::default().stability(meal, backend, runs)
}

impl From<BackendError> for DietError {
    fn from(e: BackendError) -> Self {
        DietError::BackendUnavailable(e.to_string())
    }
}
