use std::path::Path;

use serde::{Deserialize, Serialize};

use super::features::FeatureGroup;
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Female,
    Male,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiabetesType {
    #[serde(rename = "1")]
    Type1,
    #[serde(rename = "2")]
    Type2,
}

/// Laboratory values from a clinical work-up. Any subset may be present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MedicalRecord {
    pub fasting_plasma_glucose_mg_dl: Option<f64>,
    pub fasting_c_peptide: Option<f64>,
    pub postprandial_c_peptide_2h: Option<f64>,
    pub fasting_insulin: Option<f64>,
    pub hba1c_percent: Option<f64>,
    pub glycated_albumin_percent: Option<f64>,
    pub total_cholesterol: Option<f64>,
    pub hdl: Option<f64>,
    pub ldl: Option<f64>,
    pub creatinine: Option<f64>,
    pub egfr: Option<f64>,
    pub uric_acid: Option<f64>,
    pub bun: Option<f64>,
    pub hypoglycemia: Option<bool>,
}

pub const BASIC_FEATURES: usize = 9;
pub const MEDICAL_FEATURES: usize = 14;

impl MedicalRecord {
    fn encode(&self) -> Result<[f64; MEDICAL_FEATURES], ModelError> {
        let vals = [
            ("fasting_plasma_glucose_mg_dl", self.fasting_plasma_glucose_mg_dl),
            ("fasting_c_peptide", self.fasting_c_peptide),
            ("postprandial_c_peptide_2h", self.postprandial_c_peptide_2h),
            ("fasting_insulin", self.fasting_insulin),
            ("hba1c_percent", self.hba1c_percent),
            ("glycated_albumin_percent", self.glycated_albumin_percent),
            ("total_cholesterol", self.total_cholesterol),
            ("hdl", self.hdl),
            ("ldl", self.ldl),
            ("creatinine", self.creatinine),
            ("egfr", self.egfr),
            ("uric_acid", self.uric_acid),
            ("bun", self.bun),
        ];
        let mut out = [0.0; MEDICAL_FEATURES];
        for (i, (name, v)) in vals.iter().enumerate() {
            if let Some(v) = v {
                if !v.is_finite() || *v < 0.0 {
                    return Err(ModelError::UnencodableField(format!("{name} = {v}")));
                }
                out[i] = *v;
            }
        }
        out[13] = if self.hypoglycemia == Some(true) { 1.0 } else { 0.0 };
        Ok(out)
    }
}

/// Basic patient information fed to the profile encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientProfile {
    pub height_cm: f64,
    pub weight_kg: f64,
    pub age_years: f64,
    pub sex: Sex,
    pub bmi: f64,
    pub diabetes_type: DiabetesType,
    pub illness_duration_years: f64,
    pub smoking: bool,
    pub drinking: bool,
    #[serde(default)]
    pub medical_record: Option<MedicalRecord>,
}

impl PatientProfile {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("height_cm", self.height_cm),
            ("weight_kg", self.weight_kg),
            ("age_years", self.age_years),
            ("bmi", self.bmi),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(ModelError::UnencodableField(format!("{name} = {v}")));
            }
        }
        if !self.illness_duration_years.is_finite() || self.illness_duration_years < 0.0 {
            return Err(ModelError::UnencodableField(format!(
                "illness_duration_years = {}",
                self.illness_duration_years
            )));
        }
        if let Some(m) = &self.medical_record {
            m.encode()?;
        }
        Ok(())
    }

    fn basic(&self) -> [f64; BASIC_FEATURES] {
        let b = |x: bool| if x { 1.0 } else { 0.0 };
        [
            self.height_cm,
            self.weight_kg,
            self.age_years,
            b(self.sex == Sex::Male),
            self.bmi,
            if self.diabetes_type == DiabetesType::Type1 { 1.0 } else { 2.0 },
            self.illness_duration_years,
            b(self.smoking),
            b(self.drinking),
        ]
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ModelError> {
        let p: PatientProfile = toml::from_str(s).map_err(|e| ModelError::UnencodableField(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let s = std::fs::read_to_string(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("profile serializes")
    }
}

/// Width of the raw profile vector for a feature group.
pub fn profile_width(group: FeatureGroup) -> usize {
    let mut w = 0;
    if group.uses_profile() {
        w += BASIC_FEATURES;
    }
    if group.uses_medical_record() {
        w += MEDICAL_FEATURES;
    }
    w
}

/// Raw (unnormalized) profile features for `group`.
///
/// A missing profile or medical record block becomes zeros.
pub fn encode_profile(profile: Option<&PatientProfile>, group: FeatureGroup) -> Result<Vec<f64>, ModelError> {
    if let Some(p) = profile {
        p.validate()?;
    }
    let mut out = Vec::with_capacity(profile_width(group));
    if group.uses_profile() {
        match profile {
            Some(p) => out.extend(p.basic()),
            None => out.extend([0.0; BASIC_FEATURES]),
        }
    }
    if group.uses_medical_record() {
        match profile.and_then(|p| p.medical_record.as_ref()) {
            Some(m) => out.extend(m.encode()?),
            None => out.extend([0.0; MEDICAL_FEATURES]),
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) fn sample_profile() -> PatientProfile {
    PatientProfile {
        height_cm: 170.0,
        weight_kg: 68.0,
        age_years: 54.0,
        sex: Sex::Male,
        bmi: 23.5,
        diabetes_type: DiabetesType::Type2,
        illness_duration_years: 6.0,
        smoking: false,
        drinking: true,
        medical_record: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodes_to_group_width() {
        let p = sample_profile();
        assert_eq!(encode_profile(Some(&p), FeatureGroup::G7).unwrap().len(), 9);
        assert_eq!(encode_profile(Some(&p), FeatureGroup::G9).unwrap().len(), 23);
        assert_eq!(encode_profile(Some(&p), FeatureGroup::G8).unwrap().len(), 14);
        assert!(encode_profile(Some(&p), FeatureGroup::G4).unwrap().is_empty());
    }

    #[test]
    fn absent_profile_is_zero_placeholder() {
        let v = encode_profile(None, FeatureGroup::G5).unwrap();
        assert_eq!(v, vec![0.0; 9]);
    }

    #[test]
    fn negative_weight_rejected() {
        let mut p = sample_profile();
        p.weight_kg = -3.0;
        assert!(matches!(
            encode_profile(Some(&p), FeatureGroup::G5),
            Err(ModelError::UnencodableField(_))
        ));
    }

    #[test]
    fn toml_sidecar_round_trips() {
        let mut p = sample_profile();
        p.medical_record = Some(MedicalRecord {
            hba1c_percent: Some(7.2),
            hypoglycemia: Some(true),
            ..Default::default()
        });
        let text = p.to_toml_string();
        assert!(text.contains("diabetes_type = \"2\""));
        assert_eq!(PatientProfile::from_toml_str(&text).unwrap(), p);
    }
}
