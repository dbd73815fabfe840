//! File-per-record store. Every record is wrapped with the SHA-256 of its
//! body and written through a temporary file and a rename.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::NaiveDateTime;
use diets_core::context::GlycemicContext;
use diets_core::model::PatientProfile;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::ServiceError;
use crate::session::SessionRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    /// Caller-chosen identifier, unique across patients.
    pub external_id: String,
    pub version: u32,
    pub profile: PatientProfile,
    pub updated_at: NaiveDateTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub path: String,
    pub sha256: String,
}

/// Per-patient model checkpoints. Each slot can be set once.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRefs {
    pub titration: Option<CheckpointRef>,
    pub forecast: Option<CheckpointRef>,
}

#[derive(Serialize, Deserialize)]
struct Sealed {
    sha256: String,
    body: Value,
}

fn digest(body: &Value) -> String {
    hex::encode(Sha256::digest(body.to_string().as_bytes()))
}

pub fn file_sha256(path: &Path) -> Result<String, ServiceError> {
    let bytes = fs::read(path).map_err(|e| ServiceError::Invalid(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub struct FileStore {
    root: PathBuf,
    create_lock: Mutex<()>,
}

fn io(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Internal(format!("store: {e}"))
}

impl FileStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let root = root.into();
        fs::create_dir_all(root.join("patients")).map_err(io)?;
        fs::create_dir_all(root.join("sessions")).map_err(io)?;
        Ok(FileStore {
            root,
            create_lock: Mutex::new(()),
        })
    }

    fn write<T: Serialize>(&self, path: &Path, value: &T) -> Result<(), ServiceError> {
        let body = serde_json::to_value(value).map_err(io)?;
        let sealed = Sealed {
            sha256: digest(&body),
            body,
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&sealed).map_err(io)?).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    fn read<T: DeserializeOwned>(&self, path: &Path, what: &str) -> Result<T, ServiceError> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(ServiceError::NotFound(what.to_string())),
            Err(e) => return Err(io(e)),
        };
        let sealed: Sealed = serde_json::from_slice(&bytes).map_err(|_| ServiceError::Integrity(what.to_string()))?;
        if digest(&sealed.body) != sealed.sha256 {
            return Err(ServiceError::Integrity(what.to_string()));
        }
        serde_json::from_value(sealed.body).map_err(|_| ServiceError::Integrity(what.to_string()))
    }

    fn patient_dir(&self, id: &str) -> Result<PathBuf, ServiceError> {
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
            return Err(ServiceError::NotFound(format!("patient {id}")));
        }
        Ok(self.root.join("patients").join(id))
    }

    fn versions(&self, id: &str) -> Result<Vec<u32>, ServiceError> {
        let dir = self.patient_dir(id)?;
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(_) => return Err(ServiceError::NotFound(format!("patient {id}"))),
        };
        let mut v: Vec<u32> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().to_string();
                name.strip_prefix("profile.v")?.strip_suffix(".json")?.parse().ok()
            })
            .collect();
        v.sort_unstable();
        if v.is_empty() {
            return Err(ServiceError::NotFound(format!("patient {id}")));
        }
        Ok(v)
    }

    /// Creates a patient, or reports the existing id for a known external id.
    pub fn create_patient(&self, external_id: &str, profile: PatientProfile, now: NaiveDateTime) -> Result<PatientRecord, ServiceError> {
        let _g = self.create_lock.lock().expect("store lock");
        for entry in fs::read_dir(self.root.join("patients")).map_err(io)? {
            let id = entry.map_err(io)?.file_name().to_string_lossy().to_string();
            let existing = self.patient(&id)?;
            if existing.external_id == external_id {
                return Err(ServiceError::Conflict {
                    message: format!("external id {external_id} already registered"),
                    existing_id: existing.patient_id,
                });
            }
        }
        let patient_id = format!("pt-{}", &uuid::Uuid::new_v4().simple().to_string()[..12]);
        let record = PatientRecord {
            patient_id: patient_id.clone(),
            external_id: external_id.to_string(),
            version: 1,
            profile,
            updated_at: now,
        };
        self.write(&self.patient_dir(&patient_id)?.join("profile.v1.json"), &record)?;
        Ok(record)
    }

    /// Stores a new profile version; earlier versions stay untouched.
    pub fn update_profile(&self, id: &str, profile: PatientProfile, now: NaiveDateTime) -> Result<PatientRecord, ServiceError> {
        let _g = self.create_lock.lock().expect("store lock");
        let current = self.patient(id)?;
        let record = PatientRecord {
            version: current.version + 1,
            profile,
            updated_at: now,
            ..current
        };
        self.write(
            &self.patient_dir(id)?.join(format!("profile.v{}.json", record.version)),
            &record,
        )?;
        Ok(record)
    }

    /// Latest profile version.
    pub fn patient(&self, id: &str) -> Result<PatientRecord, ServiceError> {
        let latest = *self.versions(id)?.last().expect("non-empty");
        self.patient_version(id, latest)
    }

    pub fn patient_version(&self, id: &str, version: u32) -> Result<PatientRecord, ServiceError> {
        self.read(
            &self.patient_dir(id)?.join(format!("profile.v{version}.json")),
            &format!("patient {id} version {version}"),
        )
    }

    pub fn patient_history(&self, id: &str) -> Result<Vec<PatientRecord>, ServiceError> {
        self.versions(id)?
            .into_iter()
            .map(|v| self.patient_version(id, v))
            .collect()
    }

    pub fn checkpoints(&self, id: &str) -> Result<CheckpointRefs, ServiceError> {
        self.patient(id)?;
        match self.read(&self.patient_dir(id)?.join("checkpoints.json"), "checkpoints") {
            Err(ServiceError::NotFound(_)) => Ok(CheckpointRefs::default()),
            other => other,
        }
    }

    /// Registers checkpoints; a slot that is already set cannot change.
    pub fn register_checkpoints(&self, id: &str, new: CheckpointRefs) -> Result<CheckpointRefs, ServiceError> {
        let _g = self.create_lock.lock().expect("store lock");
        let mut refs = self.checkpoints(id)?;
        for (slot, incoming, name) in [
            (&mut refs.titration, new.titration, "titration"),
            (&mut refs.forecast, new.forecast, "forecast"),
        ] {
            if let Some(r) = incoming {
                match slot {
                    Some(existing) if *existing != r => {
                        return Err(ServiceError::Conflict {
                            message: format!("{name} checkpoint already registered"),
                            existing_id: existing.path.clone(),
                        })
                    }
                    _ => *slot = Some(r),
                }
            }
        }
        self.write(&self.patient_dir(id)?.join("checkpoints.json"), &refs)?;
        Ok(refs)
    }

    pub fn save_history(&self, id: &str, context: &GlycemicContext) -> Result<(), ServiceError> {
        self.write(&self.patient_dir(id)?.join("history.json"), context)
    }

    pub fn history(&self, id: &str) -> Result<Option<GlycemicContext>, ServiceError> {
        match self.read(&self.patient_dir(id)?.join("history.json"), "history") {
            Ok(c) => Ok(Some(c)),
            Err(ServiceError::NotFound(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn session_path(&self, id: &str) -> Result<PathBuf, ServiceError> {
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_hexdigit() || c == '-') {
            return Err(ServiceError::NotFound(format!("session {id}")));
        }
        Ok(self.root.join("sessions").join(format!("{id}.json")))
    }

    /// Sessions are written once.
    pub fn put_session(&self, record: &SessionRecord) -> Result<(), ServiceError> {
        let path = self.session_path(&record.session_id)?;
        if path.exists() {
            return Err(ServiceError::Conflict {
                message: "session exists".into(),
                existing_id: record.session_id.clone(),
            });
        }
        self.write(&path, record)
    }

    pub fn session(&self, id: &str) -> Result<SessionRecord, ServiceError> {
        self.read(&self.session_path(id)?, &format!("session {id}"))
    }

    pub fn session_file(&self, id: &str) -> Result<PathBuf, ServiceError> {
        self.session_path(id)
    }
}
