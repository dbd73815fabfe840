//! Inference-time view of a patient: the last `n` slots, the previous day of
//! basal insulin, the profile and what is planned for the next `m - n` slots.

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diet::NutrientEstimate;
use crate::model::{encode_profile, BasalHistory, ModelConfig, ModelError, ModelInput, PatientProfile, TemporalBundle};
use crate::pipeline::{Channel, Clip, BASAL_HISTORY_SLOTS, GRID_CHANNELS, SLOT_MINUTES};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContextError {
    #[error("{field} has {got} slots, expected {expected}")]
    Length { field: &'static str, expected: usize, got: usize },
    #[error("{field} holds a negative or non-finite value")]
    Value { field: &'static str },
}

/// Past slots of every numeric channel, canonical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotHistory {
    pub glucose_mg_dl: Vec<f64>,
    pub bolus_iu: Vec<f64>,
    pub basal_iu: Vec<f64>,
    pub carb_g: Vec<f64>,
    pub protein_g: Vec<f64>,
    pub fat_g: Vec<f64>,
    pub calories_cal: Vec<f64>,
    pub drug_g: Vec<f64>,
}

impl SlotHistory {
    pub fn zeros(len: usize) -> Self {
        SlotHistory {
            glucose_mg_dl: vec![0.0; len],
            bolus_iu: vec![0.0; len],
            basal_iu: vec![0.0; len],
            carb_g: vec![0.0; len],
            protein_g: vec![0.0; len],
            fat_g: vec![0.0; len],
            calories_cal: vec![0.0; len],
            drug_g: vec![0.0; len],
        }
    }

    /// Series in [`Channel::NUMERIC`] order.
    pub fn series(&self) -> [(&'static str, &Vec<f64>); GRID_CHANNELS] {
        [
            ("glucose_mg_dl", &self.glucose_mg_dl),
            ("bolus_iu", &self.bolus_iu),
            ("basal_iu", &self.basal_iu),
            ("carb_g", &self.carb_g),
            ("protein_g", &self.protein_g),
            ("fat_g", &self.fat_g),
            ("calories_cal", &self.calories_cal),
            ("drug_g", &self.drug_g),
        ]
    }
}

/// Planned intake, drugs and basal insulin over the future slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    pub carb_g: Vec<f64>,
    pub protein_g: Vec<f64>,
    pub fat_g: Vec<f64>,
    pub calories_cal: Vec<f64>,
    pub drug_g: Vec<f64>,
    pub basal_iu: Vec<f64>,
}

impl Horizon {
    pub fn zeros(len: usize) -> Self {
        Horizon {
            carb_g: vec![0.0; len],
            protein_g: vec![0.0; len],
            fat_g: vec![0.0; len],
            calories_cal: vec![0.0; len],
            drug_g: vec![0.0; len],
            basal_iu: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.carb_g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.carb_g.is_empty()
    }

    /// Adds a meal estimate to slot `slot`.
    pub fn add_meal(&mut self, slot: usize, meal: &NutrientEstimate) {
        self.carb_g[slot] += meal.carbohydrate_g;
        self.protein_g[slot] += meal.protein_g;
        self.fat_g[slot] += meal.fat_g;
        self.calories_cal[slot] += meal.calories_cal;
    }

    fn series(&self) -> [(&'static str, Channel, &Vec<f64>); 6] {
        [
            ("horizon.carb_g", Channel::CarbG, &self.carb_g),
            ("horizon.protein_g", Channel::ProteinG, &self.protein_g),
            ("horizon.fat_g", Channel::FatG, &self.fat_g),
            ("horizon.calories_cal", Channel::Calories, &self.calories_cal),
            ("horizon.drug_g", Channel::DrugG, &self.drug_g),
            ("horizon.basal_iu", Channel::BasalInsulin, &self.basal_iu),
        ]
    }
}

/// Everything except the decoded series' conditioning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlycemicContext {
    pub patient_id: String,
    /// Time of the first future slot.
    pub issued_at: NaiveDateTime,
    pub history: SlotHistory,
    /// Basal doses over the 96 slots before `issued_at`.
    #[serde(default)]
    pub basal_history_iu: Option<Vec<f64>>,
    #[serde(default)]
    pub profile: Option<PatientProfile>,
    pub horizon: Horizon,
}

impl GlycemicContext {
    /// Context of a recorded clip, with the recorded future as the plan.
    pub fn from_clip(clip: &Clip, profile: Option<PatientProfile>) -> Self {
        let n = clip.history_len;
        let past = |c: Channel| clip.channel(c)[..n].to_vec();
        let future = |c: Channel| clip.channel(c)[n..].to_vec();
        GlycemicContext {
            patient_id: clip.patient_id.clone(),
            issued_at: clip.start_time + Duration::minutes(SLOT_MINUTES * n as i64),
            history: SlotHistory {
                glucose_mg_dl: past(Channel::Glucose),
                bolus_iu: past(Channel::BolusInsulin),
                basal_iu: past(Channel::BasalInsulin),
                carb_g: past(Channel::CarbG),
                protein_g: past(Channel::ProteinG),
                fat_g: past(Channel::FatG),
                calories_cal: past(Channel::Calories),
                drug_g: past(Channel::DrugG),
            },
            basal_history_iu: Some(clip.basal_history.clone()),
            profile,
            horizon: Horizon {
                carb_g: future(Channel::CarbG),
                protein_g: future(Channel::ProteinG),
                fat_g: future(Channel::FatG),
                calories_cal: future(Channel::Calories),
                drug_g: future(Channel::DrugG),
                basal_iu: future(Channel::BasalInsulin),
            },
        }
    }

    /// Checks lengths against `history` and `future` slots and that every
    /// value is finite and every non-glucose value is non-negative.
    pub fn validate(&self, history: usize, future: usize) -> Result<(), ContextError> {
        for (field, s) in self.history.series() {
            check_series(field, s, history, field != "glucose_mg_dl")?;
        }
        for (field, _, s) in self.horizon.series() {
            check_series(field, s, future, true)?;
        }
        if let Some(b) = &self.basal_history_iu {
            check_series("basal_history_iu", b, BASAL_HISTORY_SLOTS, true)?;
        }
        Ok(())
    }

    /// Model input with `condition` filling the future of the model's
    /// conditioning channel. The decoded channel's future stays zero.
    pub fn model_input(&self, config: &ModelConfig, condition: &[f64]) -> Result<ModelInput, ModelError> {
        let n = config.history_len;
        let f = config.future_len;
        self.validate(n, f).map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
        if condition.len() != f {
            return Err(ModelError::ShapeMismatch(format!(
                "conditioning trace has {} slots, expected {f}",
                condition.len()
            )));
        }
        let mut grid = vec![vec![0.0; n + f]; GRID_CHANNELS];
        for (i, (_, s)) in self.history.series().into_iter().enumerate() {
            grid[i][..n].copy_from_slice(s);
        }
        for (_, c, s) in self.horizon.series() {
            grid[index(c)][n..].copy_from_slice(s);
        }
        let target = config.task.target_channel();
        let cond = config.task.condition_channel();
        grid[index(target)][n..].iter_mut().for_each(|v| *v = 0.0);
        grid[index(cond)][n..].copy_from_slice(condition);
        let source_id = format!("{}@{}", self.patient_id, self.issued_at);
        let basal = if config.uses_basal() {
            let values = self.basal_history_iu.clone().ok_or_else(|| {
                ModelError::FeatureGroupMismatch(format!("{} needs the previous day of basal insulin", config.feature_group))
            })?;
            Some(BasalHistory {
                source_id: source_id.clone(),
                values,
            })
        } else {
            None
        };
        let profile = if config.feature_group.has_profile_branch() {
            Some(encode_profile(self.profile.as_ref(), config.feature_group)?)
        } else {
            None
        };
        let channels = config.temporal_channels();
        let values = channels.iter().map(|c| grid[index(*c)].clone()).collect();
        let input = ModelInput::assemble(
            TemporalBundle {
                source_id,
                channels,
                values,
            },
            basal,
            profile,
            grid[index(target)][..n].to_vec(),
            None,
        )?;
        input.check(config)?;
        Ok(input)
    }
}

fn index(c: Channel) -> usize {
    c.grid_index().expect("numeric channel")
}

fn check_series(field: &'static str, s: &[f64], expected: usize, non_negative: bool) -> Result<(), ContextError> {
    if s.len() != expected {
        return Err(ContextError::Length {
            field,
            expected,
            got: s.len(),
        });
    }
    if s.iter().any(|v| !v.is_finite() || (non_negative && *v < 0.0)) {
        return Err(ContextError::Value { field });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{sample_profile, synthetic_clips};
    use crate::model::{FeatureGroup, Task};

    #[test]
    fn clip_context_reproduces_clip_input() {
        let clip = &synthetic_clips("p", 2, 3)[40];
        let cfg = ModelConfig::tiny(Task::Titration, FeatureGroup::G7);
        let ctx = GlycemicContext::from_clip(clip, Some(sample_profile()));
        let n = clip.history_len;
        let input = ctx.model_input(&cfg, &clip.channel(Channel::Glucose)[n..]).unwrap();
        let mut reference = ModelInput::from_clip(clip, Some(&sample_profile()), &cfg).unwrap();
        reference.labels = None;
        assert_eq!(input.temporal.values, reference.temporal.values);
        assert_eq!(input.target_history, reference.target_history);
        assert_eq!(input.profile, reference.profile);
        assert_eq!(input.basal.unwrap().values, reference.basal.unwrap().values);
    }

    #[test]
    fn missing_basal_is_a_feature_group_mismatch() {
        let clip = &synthetic_clips("p", 2, 3)[0];
        let mut ctx = GlycemicContext::from_clip(clip, None);
        ctx.basal_history_iu = None;
        let cfg = ModelConfig::tiny(Task::Titration, FeatureGroup::G7);
        assert!(matches!(
            ctx.model_input(&cfg, &[120.0; 8]),
            Err(ModelError::FeatureGroupMismatch(_))
        ));
        let g5 = ModelConfig::tiny(Task::Titration, FeatureGroup::G5);
        assert!(ctx.model_input(&g5, &[120.0; 8]).is_ok());
    }

    #[test]
    fn validation_names_the_field() {
        let clip = &synthetic_clips("p", 2, 3)[0];
        let mut ctx = GlycemicContext::from_clip(clip, None);
        ctx.horizon.drug_g[2] = -1.0;
        assert_eq!(
            ctx.validate(24, 8),
            Err(ContextError::Value { field: "horizon.drug_g" })
        );
        ctx.horizon.drug_g.pop();
        assert!(matches!(ctx.validate(24, 8), Err(ContextError::Length { .. })));
    }
}
