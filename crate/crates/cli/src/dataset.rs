//! Canonical dataset directory: `<patient>.csv` plus optional
//! `<patient>.profile.toml`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use diets_core::model::PatientProfile;
use diets_core::pipeline::io::read_records_file;
use diets_core::pipeline::{build_grid, segment, Clip, PipelineError, SampleGrid, WindowConfig};

use crate::error::{CliError, Result};

pub struct Dataset {
    pub grids: Vec<SampleGrid>,
    pub profiles: BTreeMap<String, PatientProfile>,
}

pub fn patient_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::User(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<(String, PathBuf)> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .filter_map(|p| Some((p.file_stem()?.to_string_lossy().into_owned(), p)))
        .collect();
    files.sort();
    Ok(files)
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let files = patient_files(dir)?;
        if files.is_empty() {
            return Err(CliError::User(format!("no patient CSV files in {}", dir.display())));
        }
        let mut grids = Vec::new();
        let mut profiles = BTreeMap::new();
        for (pid, path) in files {
            let records = read_records_file(&path).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
            grids.push(build_grid(&pid, &records).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?);
            let sidecar = dir.join(format!("{pid}.profile.toml"));
            if sidecar.exists() {
                let p = PatientProfile::load(&sidecar).map_err(|e| CliError::User(format!("{}: {e}", sidecar.display())))?;
                profiles.insert(pid, p);
            }
        }
        Ok(Dataset { grids, profiles })
    }

    pub fn grid(&self, patient: &str) -> Result<&SampleGrid> {
        self.grids
            .iter()
            .find(|g| g.patient_id == patient)
            .ok_or_else(|| CliError::User(format!("patient {patient} not in the dataset")))
    }

    /// Clips of every patient; grids shorter than one window contribute none.
    pub fn clips(&self, window: WindowConfig) -> Result<Vec<Clip>> {
        let mut out = Vec::new();
        for g in &self.grids {
            out.extend(patient_clips(g, window)?);
        }
        Ok(out)
    }
}

pub fn patient_clips(grid: &SampleGrid, window: WindowConfig) -> Result<Vec<Clip>> {
    match segment(grid, window) {
        Ok(c) => Ok(c),
        Err(PipelineError::GridTooShort { .. }) => {
            tracing::warn!(patient = %grid.patient_id, slots = grid.len(), "shorter than one window");
            Ok(Vec::new())
        }
        Err(e) => Err(CliError::User(e.to_string())),
    }
}
