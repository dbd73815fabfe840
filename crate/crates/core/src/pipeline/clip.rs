use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::grid::{SampleGrid, GRID_CHANNELS};
use super::record::Channel;
use super::PipelineError;

/// Slots in the 24 hours of basal history that precede a clip's future.
pub const BASAL_HISTORY_SLOTS: usize = 96;
/// Future horizon of the default window: 2 hours of 15-minute slots.
pub const DEFAULT_FUTURE_LEN: usize = 8;

/// Sliding-window geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Total window width `m`.
    pub window: usize,
    /// History length `n`.
    pub history: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    /// 8-hour window with the last 2 hours as future.
    fn default() -> Self {
        WindowConfig {
            window: 32,
            history: 24,
            stride: 1,
        }
    }
}

impl WindowConfig {
    pub fn new(window: usize, history: usize, stride: usize) -> Result<Self, PipelineError> {
        let cfg = WindowConfig {
            window,
            history,
            stride,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn future(&self) -> usize {
        self.window - self.history
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.window > self.history && self.history > 0) {
            return Err(PipelineError::InvalidWindow(format!(
                "need window > history > 0, got window={} history={}",
                self.window, self.history
            )));
        }
        if self.stride == 0 {
            return Err(PipelineError::InvalidWindow("stride must be positive".into()));
        }
        Ok(())
    }

    /// Number of clips a grid of `len` slots yields.
    pub fn clip_count(&self, len: usize) -> usize {
        if len < self.window {
            0
        } else {
            (len - self.window) / self.stride + 1
        }
    }
}

/// One window of a patient grid with its history/future split.
///
/// `values` keeps the unmasked data; the future bolus and glucose slots are
/// labels and only reach a model through [`Clip::model_view`], which zeroes
/// them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub patient_id: String,
    pub start_slot: usize,
    pub start_time: NaiveDateTime,
    pub history_len: usize,
    /// Per numeric channel, `window` values.
    pub values: Vec<Vec<f64>>,
    pub missing: Vec<Vec<bool>>,
    /// Basal insulin over the 96 slots ending at the history boundary.
    pub basal_history: Vec<f64>,
    pub bolus_label_mask: Vec<bool>,
    pub glucose_label_mask: Vec<bool>,
}

impl Clip {
    pub fn id(&self) -> String {
        format!("{}:{}", self.patient_id, self.start_slot)
    }

    pub fn window_len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn future_len(&self) -> usize {
        self.window_len() - self.history_len
    }

    /// Patient-day used to keep related clips on one side of a split.
    pub fn day(&self) -> NaiveDate {
        self.start_time.date()
    }

    pub fn channel(&self, channel: Channel) -> &[f64] {
        &self.values[channel.grid_index().expect("numeric channel")]
    }

    /// Future bolus doses, the titration labels.
    pub fn bolus_labels(&self) -> Vec<f64> {
        masked_values(self.channel(Channel::BolusInsulin), &self.bolus_label_mask)
    }

    /// Future glucose readings, the forecast labels.
    pub fn glucose_labels(&self) -> Vec<f64> {
        masked_values(self.channel(Channel::Glucose), &self.glucose_label_mask)
    }

    /// Channel data as a model may see it: masked label slots are zero.
    pub fn model_view(&self) -> Vec<Vec<f64>> {
        let bolus = Channel::BolusInsulin.grid_index().expect("numeric");
        let glucose = Channel::Glucose.grid_index().expect("numeric");
        let mut out = self.values.clone();
        for (slot, masked) in self.bolus_label_mask.iter().enumerate() {
            if *masked {
                out[bolus][slot] = 0.0;
            }
        }
        for (slot, masked) in self.glucose_label_mask.iter().enumerate() {
            if *masked {
                out[glucose][slot] = 0.0;
            }
        }
        out
    }
}

fn masked_values(values: &[f64], mask: &[bool]) -> Vec<f64> {
    values
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(v, _)| *v)
        .collect()
}

/// Cuts a grid into overlapping clips.
pub fn segment(grid: &SampleGrid, cfg: WindowConfig) -> Result<Vec<Clip>, PipelineError> {
    cfg.validate()?;
    let len = grid.len();
    if len < cfg.window {
        return Err(PipelineError::GridTooShort {
            len,
            window: cfg.window,
        });
    }
    let basal = grid.channel(Channel::BasalInsulin);
    let label_mask: Vec<bool> = (0..cfg.window).map(|i| i >= cfg.history).collect();
    let clips = (0..cfg.clip_count(len))
        .map(|k| {
            let start = k * cfg.stride;
            let end = start + cfg.window;
            let boundary = start + cfg.history;
            let basal_history = (0..BASAL_HISTORY_SLOTS)
                .map(|i| {
                    let back = BASAL_HISTORY_SLOTS - i;
                    boundary.checked_sub(back).map_or(0.0, |s| basal[s])
                })
                .collect();
            Clip {
                patient_id: grid.patient_id.clone(),
                start_slot: start,
                start_time: grid.slot_time(start),
                history_len: cfg.history,
                values: (0..GRID_CHANNELS)
                    .map(|c| grid.values[c][start..end].to_vec())
                    .collect(),
                missing: (0..GRID_CHANNELS)
                    .map(|c| grid.missing[c][start..end].to_vec())
                    .collect(),
                basal_history,
                bolus_label_mask: label_mask.clone(),
                glucose_label_mask: label_mask.clone(),
            }
        })
        .collect();
    Ok(clips)
}

/// Writes clip values back onto a grid of `len` slots. Slots no clip covers
/// stay `None`.
pub fn reassemble(clips: &[Clip], len: usize) -> Vec<Vec<Option<f64>>> {
    let mut out = vec![vec![None; len]; GRID_CHANNELS];
    for clip in clips {
        for (c, series) in clip.values.iter().enumerate() {
            for (i, v) in series.iter().enumerate() {
                if let Some(slot) = out[c].get_mut(clip.start_slot + i) {
                    *slot = Some(*v);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn grid(len: usize) -> SampleGrid {
        let start = NaiveDate::from_ymd_opt(2024, 1, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap();
        let values = (0..GRID_CHANNELS)
            .map(|c| (0..len).map(|s| (c * 1000 + s) as f64).collect())
            .collect();
        SampleGrid::from_values("p1", start, values).unwrap()
    }

    #[test]
    fn clip_count_follows_formula() {
        let clips = segment(&grid(40), WindowConfig::default()).unwrap();
        assert_eq!(clips.len(), 9);
        assert_eq!(clips[0].future_len(), 8);
        let clips = segment(&grid(40), WindowConfig::new(32, 24, 3).unwrap()).unwrap();
        assert_eq!(clips.len(), 3);
    }

    #[test]
    fn short_grid_rejected() {
        assert!(matches!(
            segment(&grid(31), WindowConfig::default()),
            Err(PipelineError::GridTooShort { len: 31, window: 32 })
        ));
    }

    #[test]
    fn invalid_window_rejected() {
        assert!(WindowConfig::new(8, 8, 1).is_err());
        assert!(WindowConfig::new(8, 0, 1).is_err());
        assert!(WindowConfig::new(8, 4, 0).is_err());
    }

    #[test]
    fn labels_and_model_view() {
        let clips = segment(&grid(33), WindowConfig::default()).unwrap();
        let c = &clips[1];
        let bolus = Channel::BolusInsulin.grid_index().unwrap();
        assert_eq!(c.bolus_labels(), (25..33).map(|s| (bolus * 1000 + s) as f64).collect::<Vec<_>>());
        let view = c.model_view();
        assert!(view[bolus][24..].iter().all(|v| *v == 0.0));
        assert_eq!(view[bolus][23], (bolus * 1000 + 24) as f64);
        let carb = Channel::CarbG.grid_index().unwrap();
        assert_eq!(view[carb], c.values[carb]);
    }

    #[test]
    fn basal_history_is_zero_padded() {
        let clips = segment(&grid(40), WindowConfig::default()).unwrap();
        let b = Channel::BasalInsulin.grid_index().unwrap();
        let h = &clips[0].basal_history;
        assert_eq!(h.len(), BASAL_HISTORY_SLOTS);
        // boundary = 24, so the last 24 entries are slots 0..24.
        assert!(h[..72].iter().all(|v| *v == 0.0));
        assert_eq!(h[72], (b * 1000) as f64);
        assert_eq!(h[95], (b * 1000 + 23) as f64);
    }

    #[test]
    fn reassemble_round_trips() {
        let g = grid(50);
        let clips = segment(&g, WindowConfig::new(16, 12, 5).unwrap()).unwrap();
        let back = reassemble(&clips, g.len());
        for c in 0..GRID_CHANNELS {
            for s in 0..g.len() {
                if let Some(v) = back[c][s] {
                    assert_eq!(v, g.values[c][s]);
                }
            }
        }
        // stride 5 and width 16 covers 0..46
        assert!(back[0][45].is_some());
        assert!(back[0][46].is_none());
    }
}
