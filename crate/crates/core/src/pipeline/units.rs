//! Unit conversion onto the canonical units used everywhere downstream:
//! insulin in IU, glucose in mg/dl, nutrients and drugs in grams, energy in
//! dietary calories.

use chrono::Duration;

use super::record::{Channel, RawRecord, RecordValue, Route};
use super::PipelineError;

/// mg/dl per mmol/l of glucose.
pub const GLUCOSE_MMOL_TO_MG_DL: f64 = 18.016;
/// 1 IU = 0.01 mL.
pub const INSULIN_IU_PER_ML: f64 = 100.0;

pub const GLUCOSE_UNIT: &str = "mg/dl";
pub const INSULIN_UNIT: &str = "IU";
pub const MASS_UNIT: &str = "g";
pub const ENERGY_UNIT: &str = "cal";
pub const TEXT_UNIT: &str = "text";

/// Canonical unit string for a channel.
pub fn canonical_unit(channel: Channel) -> &'static str {
    match channel {
        Channel::Glucose => GLUCOSE_UNIT,
        Channel::BolusInsulin | Channel::BasalInsulin => INSULIN_UNIT,
        Channel::CarbG | Channel::ProteinG | Channel::FatG | Channel::DrugG => MASS_UNIT,
        Channel::Calories => ENERGY_UNIT,
        Channel::MealText => TEXT_UNIT,
    }
}

fn squash(unit: &str) -> String {
    unit.chars()
        .filter(|c| !c.is_whitespace())
        .flat_map(char::to_lowercase)
        .map(|c| if c == 'μ' || c == 'µ' { 'u' } else { c })
        .collect()
}

/// Multiplicative factor taking `unit` to the channel's canonical unit.
pub fn conversion_factor(channel: Channel, unit: &str) -> Option<f64> {
    let u = squash(unit);
    match channel {
        Channel::Glucose => match u.as_str() {
            "mg/dl" | "mgdl" | "mg/100ml" => Some(1.0),
            "mmol/l" | "mmol" | "mm" => Some(GLUCOSE_MMOL_TO_MG_DL),
            _ => None,
        },
        Channel::BolusInsulin | Channel::BasalInsulin => match u.as_str() {
            "iu" | "u" | "unit" | "units" => Some(1.0),
            "ml" => Some(INSULIN_IU_PER_ML),
            "ul" => Some(INSULIN_IU_PER_ML / 1000.0),
            _ => None,
        },
        Channel::CarbG | Channel::ProteinG | Channel::FatG | Channel::DrugG => match u.as_str() {
            "g" | "gram" | "grams" => Some(1.0),
            "mg" => Some(1e-3),
            "ug" | "mcg" => Some(1e-6),
            "kg" => Some(1e3),
            _ => None,
        },
        // Food labels write dietary calories as "cal", "Cal" or "kcal"; all
        // of them mean the same quantity.
        Channel::Calories => match u.as_str() {
            "cal" | "kcal" | "calories" => Some(1.0),
            "kj" => Some(1.0 / 4.184),
            _ => None,
        },
        Channel::MealText => match u.as_str() {
            "text" | "" => Some(1.0),
            _ => None,
        },
    }
}

/// Converts every record to canonical units.
///
/// Fails on the first record whose channel/unit pair is not in the table.
pub fn normalize_units(records: &[RawRecord]) -> Result<Vec<RawRecord>, PipelineError> {
    records
        .iter()
        .enumerate()
        .map(|(index, r)| {
            let factor = conversion_factor(r.channel, &r.unit).ok_or_else(|| {
                PipelineError::UnknownUnit {
                    index,
                    channel: r.channel,
                    unit: r.unit.clone(),
                }
            })?;
            let value = match (&r.value, r.channel) {
                (RecordValue::Text(t), Channel::MealText) => RecordValue::Text(t.clone()),
                (RecordValue::Number(v), c) if c != Channel::MealText => {
                    if !v.is_finite() {
                        return Err(PipelineError::InvalidValue {
                            index,
                            reason: format!("non-finite {} value", r.channel),
                        });
                    }
                    RecordValue::Number(v * factor)
                }
                _ => {
                    return Err(PipelineError::InvalidValue {
                        index,
                        reason: format!("value kind does not match channel {}", r.channel),
                    })
                }
            };
            Ok(RawRecord {
                timestamp: r.timestamp,
                channel: r.channel,
                value,
                unit: canonical_unit(r.channel).to_string(),
                route: r.route,
            })
        })
        .collect()
}

/// Default absorption delay for subcutaneous insulin.
pub fn default_subcutaneous_delay() -> Duration {
    Duration::minutes(30)
}

/// Shifts subcutaneous insulin records later by `delay` and re-sorts by time.
///
/// Records without a route tag are treated as subcutaneous. The sort is
/// stable, so records sharing a timestamp keep their input order.
pub fn adjust_subcutaneous_delay(records: &[RawRecord], delay: Duration) -> Vec<RawRecord> {
    let mut out: Vec<RawRecord> = records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if r.channel.is_insulin() && r.route.unwrap_or(Route::Subcutaneous) == Route::Subcutaneous
            {
                r.timestamp += delay;
            }
            r
        })
        .collect();
    out.sort_by_key(|r| r.timestamp);
    out
}
