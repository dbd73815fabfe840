use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::clip::Clip;
use super::PipelineError;

pub const TRAIN_FRACTION: f64 = 0.70;
pub const TEST_FRACTION: f64 = 0.15;
pub const MIN_SPLIT_CLIPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Clip>,
    pub val: Vec<Clip>,
    pub test: Vec<Clip>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Target (train, val, test) sizes. Train and test are floored and
/// validation takes the remainder.
pub fn split_sizes(total: usize) -> (usize, usize, usize) {
    let train = (total as f64 * TRAIN_FRACTION + 1e-9).floor() as usize;
    let test = (total as f64 * TEST_FRACTION + 1e-9).floor() as usize;
    (train, total - train - test, test)
}

/// Deterministic 70/15/15 split grouped by patient-day.
///
/// Groups are shuffled with `seed` and laid out in order; the sequence is then
/// cut at the exact target sizes. A group may straddle train/val or val/test.
/// If a single group is large enough to cover the whole validation block it
/// would straddle train and test; its smaller side is then moved into
/// validation, so sizes are exact whenever every group has at most
/// `val + 1` clips.
pub fn split(clips: &[Clip], seed: u64) -> Result<DatasetSplit, PipelineError> {
    if clips.len() < MIN_SPLIT_CLIPS {
        return Err(PipelineError::TooFewClips {
            got: clips.len(),
            need: MIN_SPLIT_CLIPS,
        });
    }
    let mut groups: BTreeMap<(String, NaiveDate), Vec<usize>> = BTreeMap::new();
    for (i, c) in clips.iter().enumerate() {
        groups
            .entry((c.patient_id.clone(), c.day()))
            .or_default()
            .push(i);
    }
    let mut order: Vec<Vec<usize>> = groups.into_values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let (n_train, n_val, _) = split_sizes(clips.len());
    // 0 = train, 1 = val, 2 = test
    let mut assign = vec![0u8; clips.len()];
    let mut pos = 0;
    for group in &order {
        for &i in group {
            assign[i] = if pos < n_train {
                0
            } else if pos < n_train + n_val {
                1
            } else {
                2
            };
            pos += 1;
        }
    }
    for group in &order {
        let in_train = group.iter().filter(|&&i| assign[i] == 0).count();
        let in_test = group.iter().filter(|&&i| assign[i] == 2).count();
        if in_train > 0 && in_test > 0 {
            let side = if in_train <= in_test { 0 } else { 2 };
            for &i in group {
                if assign[i] == side {
                    assign[i] = 1;
                }
            }
        }
    }

    let mut out = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for group in &order {
        for &i in group {
            let dest = match assign[i] {
                0 => &mut out.train,
                1 => &mut out.val,
                _ => &mut out.test,
            };
            dest.push(clips[i].clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::clip::BASAL_HISTORY_SLOTS;
    use chrono::{Duration, NaiveDate};

    pub(crate) fn clip_on_day(patient: &str, day: i64, slot: usize) -> Clip {
        let start = NaiveDate::from_ymd_opt(2024, 1, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap()
            + Duration::days(day);
        Clip {
            patient_id: patient.to_string(),
            start_slot: slot,
            start_time: start,
            history_len: 1,
            values: vec![vec![0.0; 2]; 8],
            missing: vec![vec![false; 2]; 8],
            basal_history: vec![0.0; BASAL_HISTORY_SLOTS],
            bolus_label_mask: vec![false, true],
            glucose_label_mask: vec![false, true],
        }
    }

    #[test]
    fn hundred_clips_split_70_15_15() {
        let clips: Vec<_> = (0..100).map(|i| clip_on_day("p", i, i as usize)).collect();
        let s = split(&clips, 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
    }

    #[test]
    fn ten_clips_give_validation_the_remainder() {
        let clips: Vec<_> = (0..10).map(|i| clip_on_day("p", i, i as usize)).collect();
        let s = split(&clips, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 2, 1));
    }

    #[test]
    fn too_few_clips() {
        let clips: Vec<_> = (0..9).map(|i| clip_on_day("p", i, i as usize)).collect();
        assert!(matches!(split(&clips, 1), Err(PipelineError::TooFewClips { got: 9, .. })));
    }

    #[test]
    fn same_seed_same_partition() {
        let clips: Vec<_> = (0..40).map(|i| clip_on_day("p", i % 13, i as usize)).collect();
        assert_eq!(split(&clips, 3).unwrap(), split(&clips, 3).unwrap());
    }

    #[test]
    fn large_group_never_straddles_train_and_test() {
        // Three equal days of 96 clips: val is 43 clips, smaller than a day.
        let clips: Vec<_> = (0..288)
            .map(|i| clip_on_day("p", (i / 96) as i64, i))
            .collect();
        let s = split(&clips, 11).unwrap();
        let train_days: Vec<_> = s.train.iter().map(Clip::day).collect();
        assert!(s.test.iter().all(|c| !train_days.contains(&c.day())));
        assert_eq!(s.len(), 288);
    }
}
