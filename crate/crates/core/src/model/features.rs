use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::pipeline::Channel;

/// Nested input feature sets G1..G9.
///
/// | group | temporal channels | profile | 24 h basal | medical record |
/// |-------|-------------------|---------|------------|----------------|
/// | G1 | glucose, bolus, basal | | | |
/// | G2 | G1 + carbohydrate | | | |
/// | G3 | G2 + calories, protein, fat | | | |
/// | G4 | G3 + drugs | | | |
/// | G5 | G4 | yes | | |
/// | G6 | G4 | | yes | |
/// | G7 | G4 | yes | yes | |
/// | G8 | G4 | | yes | yes |
/// | G9 | G4 | yes | yes | yes |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureGroup {
    G1,
    G2,
    G3,
    G4,
    G5,
    G6,
    G7,
    G8,
    G9,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 9] = [
        FeatureGroup::G1,
        FeatureGroup::G2,
        FeatureGroup::G3,
        FeatureGroup::G4,
        FeatureGroup::G5,
        FeatureGroup::G6,
        FeatureGroup::G7,
        FeatureGroup::G8,
        FeatureGroup::G9,
    ];

    /// Default group for the titration model.
    pub const TITRATION_DEFAULT: FeatureGroup = FeatureGroup::G7;
    /// Default group for the glucose forecast model.
    pub const FORECAST_DEFAULT: FeatureGroup = FeatureGroup::G5;

    pub fn temporal_channels(self) -> Vec<Channel> {
        use Channel::*;
        match self {
            FeatureGroup::G1 => vec![Glucose, BolusInsulin, BasalInsulin],
            FeatureGroup::G2 => vec![Glucose, BolusInsulin, BasalInsulin, CarbG],
            FeatureGroup::G3 => vec![Glucose, BolusInsulin, BasalInsulin, CarbG, Calories, ProteinG, FatG],
            _ => vec![Glucose, BolusInsulin, BasalInsulin, CarbG, Calories, ProteinG, FatG, DrugG],
        }
    }

    pub fn uses_profile(self) -> bool {
        matches!(self, FeatureGroup::G5 | FeatureGroup::G7 | FeatureGroup::G9)
    }

    pub fn uses_basal_history(self) -> bool {
        matches!(
            self,
            FeatureGroup::G6 | FeatureGroup::G7 | FeatureGroup::G8 | FeatureGroup::G9
        )
    }

    pub fn uses_medical_record(self) -> bool {
        matches!(self, FeatureGroup::G8 | FeatureGroup::G9)
    }

    /// Whether the profile encoder branch exists at all.
    pub fn has_profile_branch(self) -> bool {
        self.uses_profile() || self.uses_medical_record()
    }

    /// Every input of `other` is also an input of `self`.
    pub fn includes(self, other: FeatureGroup) -> bool {
        let mine = self.temporal_channels();
        other.temporal_channels().iter().all(|c| mine.contains(c))
            && (!other.uses_profile() || self.uses_profile())
            && (!other.uses_basal_history() || self.uses_basal_history())
            && (!other.uses_medical_record() || self.uses_medical_record())
    }
}

impl fmt::Display for FeatureGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for FeatureGroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FeatureGroup::ALL
            .iter()
            .copied()
            .find(|g| g.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown feature group {s:?} (expected G1..G9)"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use FeatureGroup::*;

    #[test]
    fn nesting_follows_definitions() {
        for (outer, inner) in [(G2, G1), (G3, G2), (G4, G3), (G5, G4), (G6, G4), (G7, G5), (G7, G6), (G8, G6), (G9, G7), (G9, G8)] {
            assert!(outer.includes(inner), "{outer} should include {inner}");
        }
        assert!(!G6.includes(G5));
        assert!(!G5.includes(G6));
        assert!(!G8.includes(G7));
        assert!(!G1.includes(G2));
    }

    #[test]
    fn defaults_and_parse() {
        assert_eq!(FeatureGroup::TITRATION_DEFAULT, G7);
        assert_eq!(FeatureGroup::FORECAST_DEFAULT, G5);
        assert_eq!("g7".parse::<FeatureGroup>().unwrap(), G7);
        assert!("G10".parse::<FeatureGroup>().is_err());
        assert_eq!(G4.temporal_channels().len(), 8);
        assert!(G8.has_profile_branch() && !G8.uses_profile());
    }
}
