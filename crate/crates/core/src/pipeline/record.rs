use std::fmt;
use std::str::FromStr;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::PipelineError;

/// Source channel of a raw record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Glucose,
    BolusInsulin,
    BasalInsulin,
    CarbG,
    ProteinG,
    FatG,
    Calories,
    DrugG,
    MealText,
}

impl Channel {
    /// Numeric channels in grid order. `MealText` is not part of the grid.
    pub const NUMERIC: [Channel; 8] = [
        Channel::Glucose,
        Channel::BolusInsulin,
        Channel::BasalInsulin,
        Channel::CarbG,
        Channel::ProteinG,
        Channel::FatG,
        Channel::Calories,
        Channel::DrugG,
    ];

    /// Position of the channel inside a [`SampleGrid`](super::SampleGrid).
    pub fn grid_index(self) -> Option<usize> {
        Channel::NUMERIC.iter().position(|c| *c == self)
    }

    pub fn is_insulin(self) -> bool {
        matches!(self, Channel::BolusInsulin | Channel::BasalInsulin)
    }

    /// Event channels are summed per slot; glucose is averaged.
    pub fn is_event(self) -> bool {
        !matches!(self, Channel::Glucose | Channel::MealText)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Glucose => "glucose",
            Channel::BolusInsulin => "bolus_insulin",
            Channel::BasalInsulin => "basal_insulin",
            Channel::CarbG => "carb_g",
            Channel::ProteinG => "protein_g",
            Channel::FatG => "fat_g",
            Channel::Calories => "calories",
            Channel::DrugG => "drug_g",
            Channel::MealText => "meal_text",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Channel {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let c = match s.trim() {
            "glucose" => Channel::Glucose,
            "bolus_insulin" => Channel::BolusInsulin,
            "basal_insulin" => Channel::BasalInsulin,
            "carb_g" => Channel::CarbG,
            "protein_g" => Channel::ProteinG,
            "fat_g" => Channel::FatG,
            "calories" => Channel::Calories,
            "drug_g" => Channel::DrugG,
            "meal_text" => Channel::MealText,
            other => return Err(PipelineError::UnknownChannel(other.to_string())),
        };
        Ok(c)
    }
}

/// Insulin administration route.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Subcutaneous,
    Intravenous,
}

impl FromStr for Route {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "subcutaneous" | "sc" | "s.c." => Ok(Route::Subcutaneous),
            "intravenous" | "iv" | "i.v." => Ok(Route::Intravenous),
            other => Err(PipelineError::UnknownRoute(other.to_string())),
        }
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Route::Subcutaneous => "subcutaneous",
            Route::Intravenous => "intravenous",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RecordValue {
    Number(f64),
    Text(String),
}

impl RecordValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            RecordValue::Number(v) => Some(*v),
            RecordValue::Text(_) => None,
        }
    }
}

/// One timestamped observation from a patient file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub timestamp: NaiveDateTime,
    pub channel: Channel,
    pub value: RecordValue,
    pub unit: String,
    pub route: Option<Route>,
}

impl RawRecord {
    pub fn number(timestamp: NaiveDateTime, channel: Channel, value: f64, unit: &str) -> Self {
        RawRecord {
            timestamp,
            channel,
            value: RecordValue::Number(value),
            unit: unit.to_string(),
            route: None,
        }
    }

    pub fn text(timestamp: NaiveDateTime, text: &str) -> Self {
        RawRecord {
            timestamp,
            channel: Channel::MealText,
            value: RecordValue::Text(text.to_string()),
            unit: "text".to_string(),
            route: None,
        }
    }

    pub fn with_route(mut self, route: Route) -> Self {
        self.route = Some(route);
        self
    }
}

/// Parses the ISO-8601 variants seen in exported patient files.
pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime, PipelineError> {
    const FORMATS: [&str; 6] = [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y/%m/%d %H:%M:%S",
        "%Y/%m/%d %H:%M",
    ];
    let s = s.trim();
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .ok_or_else(|| PipelineError::BadTimestamp(s.to_string()))
}

pub fn format_timestamp(ts: &NaiveDateTime) -> String {
    ts.format("%Y-%m-%dT%H:%M:%S").to_string()
}
