use std::path::Path;

use super::{DietError, MealDescription};

const DEFAULT_TEMPLATE: &str = include_str!("../../data/nutrition_prompt.txt");

/// Section names in render order.
pub const SECTION_NAMES: [&str; 6] = [
    "role_play",
    "task_description",
    "output_structure_requirement",
    "reasoning_guidance",
    "structure_regularization",
    "one_shot_example",
];

/// Six-section nutrition prompt.
///
/// On disk the template is plain text with a `[section_name]` line opening
/// each section.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub role_play: String,
    pub task_description: String,
    pub output_structure_requirement: String,
    pub reasoning_guidance: String,
    pub structure_regularization: String,
    pub one_shot_example: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::parse(DEFAULT_TEMPLATE).expect("bundled template is valid")
    }
}

impl PromptTemplate {
    pub fn sections(&self) -> [&str; 6] {
        [
            &self.role_play,
            &self.task_description,
            &self.output_structure_requirement,
            &self.reasoning_guidance,
            &self.structure_regularization,
            &self.one_shot_example,
        ]
    }

    pub fn validate(&self) -> Result<(), DietError> {
        for (name, body) in SECTION_NAMES.iter().zip(self.sections()) {
            if body.trim().is_empty() {
                return Err(DietError::InvalidTemplate(format!("section {name} is empty")));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, DietError> {
        let mut bodies: [Option<String>; 6] = Default::default();
        let mut current: Option<usize> = None;
        for line in text.lines() {
            let trimmed = line.trim();
            if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let idx = SECTION_NAMES
                    .iter()
                    .position(|n| *n == name)
                    .ok_or_else(|| DietError::InvalidTemplate(format!("unknown section [{name}]")))?;
                if bodies[idx].is_some() {
                    return Err(DietError::InvalidTemplate(format!("duplicate section [{name}]")));
                }
                bodies[idx] = Some(String::new());
                current = Some(idx);
                continue;
            }
            match current {
                Some(i) => {
                    let body = bodies[i].as_mut().expect("opened section");
                    body.push_str(line);
                    body.push('\n');
                }
                None if trimmed.is_empty() => {}
                None => {
                    return Err(DietError::InvalidTemplate(
                        "text before the first section header".into(),
                    ))
                }
            }
        }
        let mut take = |i: usize| -> Result<String, DietError> {
            bodies[i]
                .take()
                .map(|b| b.trim().to_string())
                .ok_or_else(|| DietError::InvalidTemplate(format!("missing section [{}]", SECTION_NAMES[i])))
        };
        let t = PromptTemplate {
            role_play: take(0)?,
            task_description: take(1)?,
            output_structure_requirement: take(2)?,
            reasoning_guidance: take(3)?,
            structure_regularization: take(4)?,
            one_shot_example: take(5)?,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, DietError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DietError::InvalidTemplate(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_file_text(&self) -> String {
        SECTION_NAMES
            .iter()
            .zip(self.sections())
            .map(|(n, b)| format!("[{n}]\n{b}\n"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Renders the six sections in order followed by the meal.
pub fn build_prompt(meal: &MealDescription, template: &PromptTemplate) -> Result<String, DietError> {
    template.validate()?;
    let text = meal.text.trim();
    if text.is_empty() {
        return Err(DietError::EmptyMeal);
    }
    let mut out = template.sections().join("\n\n");
    out.push_str("\n\nNow analyse this meal.\nMeal description: ");
    out.push_str(text);
    if let Some(hint) = meal.portion_hint.as_deref().filter(|h| !h.trim().is_empty()) {
        out.push_str("\nPortion notes: ");
        out.push_str(hint.trim());
    }
    out.push('\n');
    Ok(out)
}
