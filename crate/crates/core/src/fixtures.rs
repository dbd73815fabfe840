//! Synthetic patient data for tests, examples and demos.
//!
//! The generator is a toy: three meals a day, a bolus with each meal, a
//! basal dose every 4 hours and a glucose curve that rises after carbs and
//! falls after insulin. It has no physiological fidelity.

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{DiabetesType, PatientProfile, Sex};
use crate::pipeline::{segment, Channel, Clip, RawRecord, SampleGrid, WindowConfig, GRID_CHANNELS};

/// Midnight of the first synthetic day.
pub fn epoch() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 3, 1)
        .expect("valid date")
        .and_hms_opt(0, 0, 0)
        .expect("valid time")
}

/// `days` of 15-minute slots for one patient.
pub fn synthetic_grid(patient_id: &str, days: usize, seed: u64) -> SampleGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = days * 96;
    let mut values = vec![vec![0.0; len]; GRID_CHANNELS];
    let idx = |c: Channel| c.grid_index().expect("numeric");
    let (g, bolus, basal, carb, protein, fat, cal, drug) = (
        idx(Channel::Glucose),
        idx(Channel::BolusInsulin),
        idx(Channel::BasalInsulin),
        idx(Channel::CarbG),
        idx(Channel::ProteinG),
        idx(Channel::FatG),
        idx(Channel::Calories),
        idx(Channel::DrugG),
    );
    for day in 0..days {
        for (hour, size) in [(7.5, 45.0), (12.0, 70.0), (18.5, 60.0)] {
            let slot = day * 96 + (hour * 4.0) as usize + rng.gen_range(0..3);
            let c: f64 = size * rng.gen_range(0.7..1.3);
            values[carb][slot] = c;
            values[protein][slot] = c * 0.3;
            values[fat][slot] = c * 0.25;
            values[cal][slot] = c * 4.0 + c * 0.3 * 4.0 + c * 0.25 * 9.0;
            values[bolus][slot] = (c / 10.0 * 100.0).round() / 100.0;
        }
        values[drug][day * 96 + 30] = 0.5;
        for k in 0..6 {
            values[basal][day * 96 + k * 16] = 1.5;
        }
    }
    // carbs act faster than insulin; a weak pull back toward 120 mg/dl stands in for everything else
    let mut cob = 0.0;
    let mut iob = 0.0;
    let mut glucose: f64 = 120.0 + rng.gen_range(-10.0..10.0);
    for s in 0..len {
        cob = cob * 0.75 + values[carb][s];
        iob = iob * 0.9 + values[bolus][s];
        glucose += 3.0 * cob * 0.25 - 28.0 * iob * 0.1 + 0.03 * (120.0 - glucose) + rng.gen_range(-2.0..2.0);
        glucose = glucose.clamp(45.0, 380.0);
        values[g][s] = (glucose * 10.0).round() / 10.0;
    }
    SampleGrid::from_values(patient_id, epoch(), values).expect("consistent grid")
}

/// Canonical raw records equivalent to [`synthetic_grid`].
pub fn synthetic_records(patient_id: &str, days: usize, seed: u64) -> Vec<RawRecord> {
    let grid = synthetic_grid(patient_id, days, seed);
    let mut out = Vec::new();
    for s in 0..grid.len() {
        let t = grid.start + Duration::minutes(15 * s as i64);
        for c in Channel::NUMERIC {
            let v = grid.channel(c)[s];
            if c == Channel::Glucose || v != 0.0 {
                out.push(RawRecord::number(t, c, v, crate::pipeline::canonical_unit(c)));
            }
        }
    }
    out
}

/// Clips of a synthetic patient with the default window.
pub fn synthetic_clips(patient_id: &str, days: usize, seed: u64) -> Vec<Clip> {
    segment(&synthetic_grid(patient_id, days, seed), WindowConfig::default()).expect("long enough")
}

/// One clip whose future holds a meal bolus, for memorization checks.
pub fn fixture_clip() -> Clip {
    let clips = synthetic_clips("fixture", 2, 7);
    clips
        .into_iter()
        .find(|c| c.bolus_labels().iter().any(|v| *v > 0.0) && c.bolus_labels()[0] == 0.0)
        .expect("some clip has a future meal bolus")
}

/// One clip with no bolus and no carbohydrate in its future.
pub fn quiet_clip() -> Clip {
    let clips = synthetic_clips("fixture", 2, 7);
    clips
        .into_iter()
        .find(|c| {
            let n = c.history_len;
            c.bolus_labels().iter().all(|v| *v == 0.0) && c.channel(Channel::CarbG)[n..].iter().all(|v| *v == 0.0)
        })
        .expect("some clip has a quiet future")
}

pub fn sample_profile() -> PatientProfile {
    PatientProfile {
        height_cm: 168.0,
        weight_kg: 66.0,
        age_years: 57.0,
        sex: Sex::Female,
        bmi: 23.4,
        diabetes_type: DiabetesType::Type2,
        illness_duration_years: 8.0,
        smoking: false,
        drinking: false,
        medical_record: None,
    }
}
