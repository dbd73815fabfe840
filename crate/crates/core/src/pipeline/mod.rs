//! Raw records to canonical, grid-aligned, windowed clips.
//!
//! The stages run in this order:
//!
//! 1. [`normalize_units`] converts every record to canonical units.
//! 2. [`adjust_subcutaneous_delay`] aligns subcutaneous insulin with
//!    intravenous absorption timing.
//! 3. [`resample_to_grid`] aggregates onto the 15-minute grid.
//! 4. [`segment`] cuts sliding-window clips with masked futures.
//! 5. [`split`] partitions clips into train/validation/test.
//!
//! Every stage is a pure function over its inputs.

mod clip;
mod grid;
pub mod io;
mod record;
mod split;
mod units;

use thiserror::Error;

pub use clip::{reassemble, segment, Clip, WindowConfig, BASAL_HISTORY_SLOTS, DEFAULT_FUTURE_LEN};
pub use grid::{resample_to_grid, SampleGrid, GRID_CHANNELS, SLOT_MINUTES};
pub use record::{format_timestamp, parse_timestamp, Channel, RawRecord, RecordValue, Route};
pub use split::{split, split_sizes, DatasetSplit, MIN_SPLIT_CLIPS};
pub use units::{
    adjust_subcutaneous_delay, canonical_unit, conversion_factor, default_subcutaneous_delay,
    normalize_units, GLUCOSE_MMOL_TO_MG_DL, INSULIN_IU_PER_ML,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("record {index}: unknown unit {unit:?} for channel {channel}")]
    UnknownUnit {
        index: usize,
        channel: Channel,
        unit: String,
    },
    #[error("record {index}: {reason}")]
    InvalidValue { index: usize, reason: String },
    #[error("record {index}: unit {unit:?} is not canonical")]
    NotCanonical { index: usize, unit: String },
    #[error("record {index} is earlier than its predecessor")]
    Unsorted { index: usize },
    #[error("unknown channel {0:?}")]
    UnknownChannel(String),
    #[error("unknown route {0:?}")]
    UnknownRoute(String),
    #[error("unparseable timestamp {0:?}")]
    BadTimestamp(String),
    #[error("no records in range")]
    EmptyInput,
    #[error("grid of {len} slots is shorter than window {window}")]
    GridTooShort { len: usize, window: usize },
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("need at least {need} clips to split, got {got}")]
    TooFewClips { got: usize, need: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("row {row}: {reason}")]
    Format { row: usize, reason: String },
    #[error("io: {0}")]
    Io(String),
}

/// Runs normalization, delay adjustment and resampling for one patient.
pub fn build_grid(patient_id: &str, records: &[RawRecord]) -> Result<SampleGrid, PipelineError> {
    let canonical = normalize_units(records)?;
    let shifted = adjust_subcutaneous_delay(&canonical, default_subcutaneous_delay());
    resample_to_grid(patient_id, &shifted, SLOT_MINUTES)
}
