//! Append-only audit trail for plans and guard iterations.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::safety::{GuardIteration, GuardOutcome};
use crate::titration::{InsulinPlan, SafetyStatus};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit io: {0}")]
    Io(#[from] std::io::Error),
    #[error("audit encoding: {0}")]
    Encode(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEntry {
    Recommendation {
        patient_id: String,
        issued_at: NaiveDateTime,
        doses_iu: Vec<f64>,
    },
    Iteration(GuardIteration),
    Outcome {
        patient_id: String,
        safety_status: SafetyStatus,
        retitration_count: usize,
        selected_iteration: usize,
        doses_iu: Vec<f64>,
        diagnostics: Vec<String>,
    },
}

impl AuditEntry {
    pub fn recommendation(patient_id: &str, plan: &InsulinPlan) -> Self {
        AuditEntry::Recommendation {
            patient_id: patient_id.to_string(),
            issued_at: plan.created_at,
            doses_iu: plan.doses_iu.clone(),
        }
    }

    pub fn outcome(patient_id: &str, outcome: &GuardOutcome) -> Self {
        AuditEntry::Outcome {
            patient_id: patient_id.to_string(),
            safety_status: outcome.plan.safety_status,
            retitration_count: outcome.plan.retitration_count,
            selected_iteration: outcome.selected_iteration,
            doses_iu: outcome.plan.doses_iu.clone(),
            diagnostics: outcome.diagnostics.clone(),
        }
    }
}

pub trait AuditSink: Send + Sync {
    fn append(&self, entry: &AuditEntry) -> Result<(), AuditError>;
}

/// Discards everything.
pub struct NullAudit;

impl AuditSink for NullAudit {
    fn append(&self, _: &AuditEntry) -> Result<(), AuditError> {
        Ok(())
    }
}

#[derive(Default)]
pub struct MemoryAudit {
    entries: Mutex<Vec<AuditEntry>>,
}

impl MemoryAudit {
    pub fn entries(&self) -> Vec<AuditEntry> {
        self.entries.lock().expect("audit lock").clone()
    }
}

impl AuditSink for MemoryAudit {
    fn append(&self, entry: &AuditEntry) -> Result<(), AuditError> {
        self.entries.lock().expect("audit lock").push(entry.clone());
        Ok(())
    }
}

/// One JSON object per line, opened in append mode for every write.
pub struct JsonlAudit {
    path: PathBuf,
    lock: Mutex<()>,
}

impl JsonlAudit {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        JsonlAudit {
            path: path.into(),
            lock: Mutex::new(()),
        }
    }

    pub fn read_all(&self) -> Result<Vec<AuditEntry>, AuditError> {
        let text = match std::fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(AuditError::from))
            .collect()
    }
}

impl AuditSink for JsonlAudit {
    fn append(&self, entry: &AuditEntry) -> Result<(), AuditError> {
        let line = serde_json::to_string(entry)?;
        let _guard = self.lock.lock().expect("audit lock");
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(f, "{line}")?;
        Ok(())
    }
}
