use chrono::{Duration, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use super::record::{Channel, RawRecord, RecordValue};
use super::units::canonical_unit;
use super::PipelineError;

/// Number of numeric channels carried by a grid.
pub const GRID_CHANNELS: usize = Channel::NUMERIC.len();
/// Default slot width in minutes.
pub const SLOT_MINUTES: i64 = 15;

/// Multichannel series on a fixed time grid, canonical units, zero-filled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleGrid {
    pub patient_id: String,
    pub start: NaiveDateTime,
    pub interval_minutes: i64,
    /// One sequence per entry of [`Channel::NUMERIC`], all of length `len()`.
    pub values: Vec<Vec<f64>>,
    /// `true` where the slot had no observation and was zero-filled.
    pub missing: Vec<Vec<bool>>,
    /// Free-text meal notes keyed by slot.
    pub notes: Vec<(usize, String)>,
}

impl SampleGrid {
    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, channel: Channel) -> &[f64] {
        let i = channel.grid_index().expect("numeric channel");
        &self.values[i]
    }

    pub fn missing_mask(&self, channel: Channel) -> &[bool] {
        let i = channel.grid_index().expect("numeric channel");
        &self.missing[i]
    }

    pub fn slot_time(&self, slot: usize) -> NaiveDateTime {
        self.start + Duration::minutes(self.interval_minutes * slot as i64)
    }

    /// Builds a grid from already aligned channel data. Missing bits default
    /// to `false`.
    pub fn from_values(
        patient_id: &str,
        start: NaiveDateTime,
        values: Vec<Vec<f64>>,
    ) -> Result<Self, PipelineError> {
        if values.len() != GRID_CHANNELS {
            return Err(PipelineError::ShapeMismatch(format!(
                "expected {GRID_CHANNELS} channels, got {}",
                values.len()
            )));
        }
        let len = values[0].len();
        if values.iter().any(|v| v.len() != len) {
            return Err(PipelineError::ShapeMismatch("ragged channels".into()));
        }
        if len == 0 {
            return Err(PipelineError::EmptyInput);
        }
        let missing = vec![vec![false; len]; GRID_CHANNELS];
        Ok(SampleGrid {
            patient_id: patient_id.to_string(),
            start,
            interval_minutes: SLOT_MINUTES,
            values,
            missing,
            notes: Vec::new(),
        })
    }

    /// Fraction of glucose slots that carried a reading.
    pub fn glucose_coverage(&self) -> f64 {
        let m = self.missing_mask(Channel::Glucose);
        if m.is_empty() {
            return 0.0;
        }
        m.iter().filter(|x| !**x).count() as f64 / m.len() as f64
    }

    /// Fraction of missing cells across all channels.
    pub fn missing_rate(&self) -> f64 {
        let total: usize = self.missing.iter().map(Vec::len).sum();
        if total == 0 {
            return 0.0;
        }
        let miss: usize = self.missing.iter().flatten().filter(|x| **x).count();
        miss as f64 / total as f64
    }
}

fn floor_to_interval(ts: NaiveDateTime, minutes: i64) -> NaiveDateTime {
    let day_start = ts.date().and_hms_opt(0, 0, 0).expect("midnight");
    let since = (ts.hour() as i64) * 60 + ts.minute() as i64;
    day_start + Duration::minutes(since - since.rem_euclid(minutes))
}

/// Aggregates canonical, time-sorted records onto a fixed grid.
///
/// Event channels (insulin, nutrients, drugs, energy) are summed per slot and
/// glucose readings are averaged. Slots with no observation hold 0.0 and have
/// their missing bit set.
pub fn resample_to_grid(
    patient_id: &str,
    records: &[RawRecord],
    interval_minutes: i64,
) -> Result<SampleGrid, PipelineError> {
    if interval_minutes <= 0 {
        return Err(PipelineError::InvalidWindow(format!(
            "interval must be positive, got {interval_minutes}"
        )));
    }
    if records.is_empty() {
        return Err(PipelineError::EmptyInput);
    }
    for (i, w) in records.windows(2).enumerate() {
        if w[1].timestamp < w[0].timestamp {
            return Err(PipelineError::Unsorted { index: i + 1 });
        }
    }
    for (index, r) in records.iter().enumerate() {
        if r.unit != canonical_unit(r.channel) {
            return Err(PipelineError::NotCanonical {
                index,
                unit: r.unit.clone(),
            });
        }
    }

    let start = floor_to_interval(records[0].timestamp, interval_minutes);
    let last = records.last().expect("non-empty").timestamp;
    let len = ((last - start).num_minutes() / interval_minutes) as usize + 1;

    let mut sums = vec![vec![0.0f64; len]; GRID_CHANNELS];
    let mut counts = vec![vec![0usize; len]; GRID_CHANNELS];
    let mut notes = Vec::new();
    for (index, r) in records.iter().enumerate() {
        let slot = ((r.timestamp - start).num_minutes() / interval_minutes) as usize;
        match (&r.value, r.channel.grid_index()) {
            (RecordValue::Number(v), Some(c)) => {
                sums[c][slot] += v;
                counts[c][slot] += 1;
            }
            (RecordValue::Text(t), None) => notes.push((slot, t.clone())),
            _ => {
                return Err(PipelineError::InvalidValue {
                    index,
                    reason: format!("value kind does not match channel {}", r.channel),
                })
            }
        }
    }

    let mut values = vec![vec![0.0f64; len]; GRID_CHANNELS];
    let mut missing = vec![vec![true; len]; GRID_CHANNELS];
    for (c, channel) in Channel::NUMERIC.iter().enumerate() {
        for s in 0..len {
            let n = counts[c][s];
            if n == 0 {
                continue;
            }
            missing[c][s] = false;
            values[c][s] = if channel.is_event() {
                sums[c][s]
            } else {
                sums[c][s] / n as f64
            };
        }
    }

    Ok(SampleGrid {
        patient_id: patient_id.to_string(),
        start,
        interval_minutes,
        values,
        missing,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::record::parse_timestamp;

    fn at(s: &str) -> NaiveDateTime {
        parse_timestamp(s).unwrap()
    }

    #[test]
    fn boluses_in_one_slot_are_summed() {
        let recs = vec![
            RawRecord::number(at("2024-01-01T08:01"), Channel::BolusInsulin, 2.0, "IU"),
            RawRecord::number(at("2024-01-01T08:14"), Channel::BolusInsulin, 2.0, "IU"),
            RawRecord::number(at("2024-01-01T08:20"), Channel::Glucose, 120.0, "mg/dl"),
        ];
        let g = resample_to_grid("p", &recs, 15).unwrap();
        assert_eq!(g.start, at("2024-01-01T08:00"));
        assert_eq!(g.len(), 2);
        assert_eq!(g.channel(Channel::BolusInsulin), &[4.0, 0.0]);
        assert!(g.missing_mask(Channel::BolusInsulin)[1]);
    }

    #[test]
    fn glucose_is_averaged() {
        let recs = vec![
            RawRecord::number(at("2024-01-01T08:00"), Channel::Glucose, 98.0, "mg/dl"),
            RawRecord::number(at("2024-01-01T08:10"), Channel::Glucose, 102.0, "mg/dl"),
        ];
        let g = resample_to_grid("p", &recs, 15).unwrap();
        assert_eq!(g.channel(Channel::Glucose), &[100.0]);
        assert!(!g.missing_mask(Channel::Glucose)[0]);
    }

    #[test]
    fn empty_glucose_slot_is_zero_filled() {
        let recs = vec![
            RawRecord::number(at("2024-01-01T08:00"), Channel::Glucose, 98.0, "mg/dl"),
            RawRecord::number(at("2024-01-01T08:31"), Channel::Glucose, 110.0, "mg/dl"),
        ];
        let g = resample_to_grid("p", &recs, 15).unwrap();
        assert_eq!(g.channel(Channel::Glucose), &[98.0, 0.0, 110.0]);
        assert_eq!(g.missing_mask(Channel::Glucose), &[false, true, false]);
        assert!(g.values.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(
            resample_to_grid("p", &[], 15),
            Err(PipelineError::EmptyInput)
        ));
    }

    #[test]
    fn unsorted_and_non_canonical_rejected() {
        let recs = vec![
            RawRecord::number(at("2024-01-01T08:30"), Channel::Glucose, 98.0, "mg/dl"),
            RawRecord::number(at("2024-01-01T08:00"), Channel::Glucose, 98.0, "mg/dl"),
        ];
        assert!(matches!(
            resample_to_grid("p", &recs, 15),
            Err(PipelineError::Unsorted { index: 1 })
        ));
        let recs = vec![RawRecord::number(at("2024-01-01T08:30"), Channel::Glucose, 5.0, "mmol/l")];
        assert!(matches!(
            resample_to_grid("p", &recs, 15),
            Err(PipelineError::NotCanonical { .. })
        ));
    }

    #[test]
    fn meal_text_becomes_note() {
        let recs = vec![
            RawRecord::number(at("2024-01-01T08:00"), Channel::Glucose, 98.0, "mg/dl"),
            RawRecord::text(at("2024-01-01T08:20"), "porridge"),
        ];
        let g = resample_to_grid("p", &recs, 15).unwrap();
        assert_eq!(g.notes, vec![(1, "porridge".to_string())]);
    }
}
