use std::io::Read;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::Deserialize;

use super::{DietError, MealDescription, NutrientEstimate, NutrientSource};

const BUNDLED_TABLE: &str = include_str!("../../data/nutrients.csv");
const DEFAULT_SERVING_G: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FoodEntry {
    pub name: String,
    tokens: Vec<String>,
    pub carb_g_per_100g: f64,
    pub protein_g_per_100g: f64,
    pub fat_g_per_100g: f64,
    pub cal_per_100g: f64,
    pub serving_g: f64,
}

#[derive(Debug, Deserialize)]
struct Row {
    food: String,
    carb_g_per_100g: f64,
    protein_g_per_100g: f64,
    fat_g_per_100g: f64,
    cal_per_100g: f64,
    serving_g: Option<f64>,
}

/// Per-100 g nutrient table.
///
/// CSV columns `food,carb_g_per_100g,protein_g_per_100g,fat_g_per_100g,cal_per_100g`
/// plus an optional `serving_g` (default 100 g) used when a meal names a food
/// without a weight.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NutrientTable {
    entries: Vec<FoodEntry>,
}

/// Lowercase, split on non-letters, and fold simple English plurals.
fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphabetic())
        .filter(|t| !t.is_empty())
        .map(singular)
        .collect()
}

fn singular(t: &str) -> String {
    if t.len() > 4 && t.ends_with("ies") {
        format!("{}y", &t[..t.len() - 3])
    } else if t.len() > 4 && (t.ends_with("oes") || t.ends_with("ches") || t.ends_with("shes")) {
        t[..t.len() - 2].to_string()
    } else if t.len() > 3 && t.ends_with('s') && !t.ends_with("ss") {
        t[..t.len() - 1].to_string()
    } else {
        t.to_string()
    }
}

impl NutrientTable {
    pub fn bundled() -> Self {
        NutrientTable::from_reader(BUNDLED_TABLE.as_bytes()).expect("bundled table parses")
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self, DietError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut entries = Vec::new();
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| DietError::Table(format!("row {}: {e}", i + 2)))?;
            let values = [
                row.carb_g_per_100g,
                row.protein_g_per_100g,
                row.fat_g_per_100g,
                row.cal_per_100g,
            ];
            if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(DietError::Table(format!("row {}: negative or non-finite value", i + 2)));
            }
            let tokens = tokenize(&row.food);
            if tokens.is_empty() {
                return Err(DietError::Table(format!("row {}: empty food name", i + 2)));
            }
            entries.push(FoodEntry {
                name: row.food,
                tokens,
                carb_g_per_100g: row.carb_g_per_100g,
                protein_g_per_100g: row.protein_g_per_100g,
                fat_g_per_100g: row.fat_g_per_100g,
                cal_per_100g: row.cal_per_100g,
                serving_g: row.serving_g.filter(|s| *s > 0.0).unwrap_or(DEFAULT_SERVING_G),
            });
        }
        Ok(NutrientTable { entries })
    }

    pub fn load(path: &Path) -> Result<Self, DietError> {
        let f = std::fs::File::open(path).map_err(|e| DietError::Table(format!("{}: {e}", path.display())))?;
        Self::from_reader(f)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry whose name tokens all occur in `tokens`; the longest name wins.
    fn best_match(&self, tokens: &[String]) -> Option<&FoodEntry> {
        let mut best: Option<&FoodEntry> = None;
        for e in &self.entries {
            if e.tokens.iter().all(|t| tokens.contains(t))
                && best.is_none_or(|b| e.tokens.len() > b.tokens.len())
            {
                best = Some(e);
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Portion {
    Grams(f64),
    Servings(f64),
}

fn portion_of(fragment: &str) -> Option<Portion> {
    static GRAMS: OnceLock<Regex> = OnceLock::new();
    static COUNT: OnceLock<Regex> = OnceLock::new();
    let grams = GRAMS.get_or_init(|| {
        Regex::new(r"(?i)(\d+(?:\.\d+)?)\s*(kg|kilograms?|g|grams?|gr)\b").expect("grams regex")
    });
    let count = COUNT.get_or_init(|| Regex::new(r"(\d+(?:\.\d+)?)").expect("count regex"));
    if let Some(c) = grams.captures(fragment) {
        let v: f64 = c[1].parse().ok()?;
        let unit = c[2].to_ascii_lowercase();
        let g = if unit.starts_with('k') { v * 1000.0 } else { v };
        return Some(Portion::Grams(g));
    }
    count
        .captures(fragment)
        .and_then(|c| c[1].parse().ok())
        .map(Portion::Servings)
}

struct Item {
    text: String,
    portion: Option<Portion>,
}

fn split_fragments(text: &str) -> Vec<String> {
    static SEP: OnceLock<Regex> = OnceLock::new();
    let sep = SEP.get_or_init(|| {
        Regex::new(r"(?i)\s*(?:,|;|\+|\n|\band\b|\bwith\b|\bplus\b)\s*").expect("separator regex")
    });
    sep.split(text)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Groups fragments into food items. A fragment that names no known food is
/// folded into the neighbouring item when it only adds a portion or
/// description ("white rice, 200 g cooked"); a fragment with its own portion
/// next to an item that already has one is kept as an unmatched food.
fn group_items(table: &NutrientTable, text: &str) -> Vec<Item> {
    let mut items: Vec<Item> = Vec::new();
    let mut pending: Option<Item> = None;
    for frag in split_fragments(text) {
        let matched = table.best_match(&tokenize(&frag)).is_some();
        let portion = portion_of(&frag);
        if matched {
            let mut item = Item { text: frag, portion };
            if let Some(p) = pending.take() {
                item.text = format!("{} {}", p.text, item.text);
                item.portion = item.portion.or(p.portion);
            }
            items.push(item);
            continue;
        }
        match items.last_mut() {
            Some(prev) if prev.portion.is_none() || portion.is_none() => {
                prev.text = format!("{} {}", prev.text, frag);
                prev.portion = prev.portion.or(portion);
            }
            Some(_) => items.push(Item { text: frag, portion }),
            None => {
                pending = Some(match pending.take() {
                    Some(p) => Item {
                        text: format!("{} {}", p.text, frag),
                        portion: p.portion.or(portion),
                    },
                    None => Item { text: frag, portion },
                })
            }
        }
    }
    if let Some(p) = pending {
        items.push(p);
    }
    items
}

/// Table-based estimate used when no language model is reachable.
///
/// Portions are grams when stated, a bare count multiplies the table
/// serving, and no quantity means one serving. Unmatched foods contribute
/// nothing and are listed in `raw_response`.
pub fn offline_estimate(meal: &MealDescription, table: &NutrientTable) -> Result<NutrientEstimate, DietError> {
    let text = meal.text.trim();
    if text.is_empty() {
        return Err(DietError::EmptyMeal);
    }
    let mut total = [0.0f64; 4];
    let mut matched = Vec::new();
    let mut unmatched = Vec::new();
    for item in group_items(table, text) {
        let Some(entry) = table.best_match(&tokenize(&item.text)) else {
            unmatched.push(item.text);
            continue;
        };
        let grams = match item.portion {
            Some(Portion::Grams(g)) => g,
            Some(Portion::Servings(n)) => n * entry.serving_g,
            None => entry.serving_g,
        };
        let scale = grams / 100.0;
        total[0] += entry.carb_g_per_100g * scale;
        total[1] += entry.protein_g_per_100g * scale;
        total[2] += entry.fat_g_per_100g * scale;
        total[3] += entry.cal_per_100g * scale;
        matched.push(format!("{} {}g", entry.name, grams));
    }
    if matched.is_empty() {
        return Err(DietError::NoMatch(text.to_string()));
    }
    let mut raw = format!("offline table: {}", matched.join("; "));
    if !unmatched.is_empty() {
        raw.push_str(&format!("\nunmatched: {}", unmatched.join("; ")));
    }
    Ok(NutrientEstimate {
        carbohydrate_g: total[0],
        protein_g: total[1],
        fat_g: total[2],
        calories_cal: total[3],
        source: NutrientSource::OfflineTable,
        raw_response: raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rice_table() -> NutrientTable {
        NutrientTable::from_reader(
            "food,carb_g_per_100g,protein_g_per_100g,fat_g_per_100g,cal_per_100g\nrice,28,2.7,0.3,130\negg,1.1,12.6,9.5,143\n"
                .as_bytes(),
        )
        .unwrap()
    }

    #[test]
    fn rice_by_weight() {
        let e = offline_estimate(&MealDescription::new("white rice 200 g"), &rice_table()).unwrap();
        assert!((e.carbohydrate_g - 56.0).abs() < 1e-9);
        assert_eq!(e.source, NutrientSource::OfflineTable);
    }

    #[test]
    fn portion_after_comma_attaches_to_food() {
        let e = offline_estimate(&MealDescription::new("white rice, 200 g cooked"), &rice_table()).unwrap();
        assert!((e.carbohydrate_g - 56.0).abs() < 1e-9);
    }

    #[test]
    fn unknown_food_is_no_match() {
        assert!(matches!(
            offline_estimate(&MealDescription::new("xyzzy"), &rice_table()),
            Err(DietError::NoMatch(_))
        ));
    }

    #[test]
    fn repeated_items_add_up() {
        let t = rice_table();
        let one = offline_estimate(&MealDescription::new("rice 100 g"), &t).unwrap();
        let two = offline_estimate(&MealDescription::new("rice 100 g and rice 100 g"), &t).unwrap();
        assert!((two.carbohydrate_g - 2.0 * one.carbohydrate_g).abs() < 1e-9);
        assert!((two.calories_cal - 2.0 * one.calories_cal).abs() < 1e-9);
    }

    #[test]
    fn unmatched_items_are_listed() {
        let e = offline_estimate(&MealDescription::new("rice 100 g, xyzzy 50 g"), &rice_table()).unwrap();
        assert!((e.carbohydrate_g - 28.0).abs() < 1e-9);
        assert!(e.raw_response.contains("unmatched: xyzzy 50 g"));
    }

    #[test]
    fn counts_use_servings_and_plurals_fold() {
        let t = NutrientTable::bundled();
        let e = offline_estimate(&MealDescription::new("2 eggs"), &t).unwrap();
        // bundled egg serving is 50 g
        assert!((e.protein_g - 12.6).abs() < 1e-9);
    }

    #[test]
    fn bundled_table_loads() {
        assert!(NutrientTable::bundled().len() > 40);
    }
}
