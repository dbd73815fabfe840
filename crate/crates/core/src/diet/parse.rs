use std::sync::OnceLock;

use regex::Regex;

use super::{DietError, NutrientEstimate, NutrientSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Key {
    Carbohydrate,
    Protein,
    Fat,
    Calories,
}

fn key_for(raw: &str) -> Option<Key> {
    let k: String = raw
        .trim()
        .trim_matches(|c| c == '"' || c == '\'' || c == '*')
        .to_ascii_lowercase()
        .replace([' ', '-'], "_");
    match k.as_str() {
        "carb" | "carbs" | "carb_g" | "carbohydrate" | "carbohydrates" | "carbohydrate_g"
        | "carbohydrates_g" => Some(Key::Carbohydrate),
        "protein" | "proteins" | "protein_g" => Some(Key::Protein),
        "fat" | "fats" | "fat_g" => Some(Key::Fat),
        "cal" | "cals" | "calorie" | "calories" | "calories_cal" | "kcal" | "energy"
        | "energy_cal" => Some(Key::Calories),
        _ => None,
    }
}

fn value_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^(-?\d+(?:\.\d*)?(?:[eE][-+]?\d+)?)\s*(?:g|grams?|kcal|cal|calories)?$")
            .expect("value regex")
    })
}

fn parse_value(key: &str, raw: &str) -> Result<f64, DietError> {
    let v = raw.trim().trim_matches(|c| c == '"' || c == '\'').trim();
    let caps = value_re()
        .captures(v)
        .ok_or_else(|| DietError::MalformedResponse(format!("{key}: non-numeric value {raw:?}")))?;
    let x: f64 = caps[1]
        .parse()
        .map_err(|_| DietError::MalformedResponse(format!("{key}: bad number {raw:?}")))?;
    if !x.is_finite() || x < 0.0 {
        return Err(DietError::MalformedResponse(format!("{key}: {x} is not a non-negative finite value")));
    }
    Ok(x)
}

/// The last `{...}` block if there is one, otherwise the whole text.
fn structured_region(text: &str) -> (&str, bool) {
    if let Some(close) = text.rfind('}') {
        if let Some(open) = text[..close].rfind('{') {
            return (&text[open + 1..close], true);
        }
    }
    (text, false)
}

/// Extracts the four nutrient values from a model response.
///
/// Accepts a flat `key: value` block, optionally wrapped in braces; keys may
/// be the canonical names (`carbohydrate_g`, `protein_g`, `fat_g`,
/// `calories_cal`) or common short forms. Every key must appear, values must
/// be non-negative numbers.
pub fn parse_response(text: &str) -> Result<NutrientEstimate, DietError> {
    let (region, braced) = structured_region(text);
    let mut found: [Option<f64>; 4] = [None; 4];
    let pieces: Vec<&str> = if braced {
        region.split([',', '\n']).collect()
    } else {
        region.lines().collect()
    };
    for piece in pieces {
        let Some((k, v)) = piece.split_once([':', '=']) else {
            continue;
        };
        let Some(key) = key_for(k.trim_start_matches(['-', ' ', '\t'])) else {
            continue;
        };
        let value = parse_value(k.trim(), v)?;
        let slot = &mut found[key as usize];
        match slot {
            Some(prev) if *prev != value => {
                return Err(DietError::MalformedResponse(format!(
                    "conflicting values for {}",
                    k.trim()
                )))
            }
            _ => *slot = Some(value),
        }
    }
    match found {
        [Some(c), Some(p), Some(f), Some(e)] => Ok(NutrientEstimate {
            carbohydrate_g: c,
            protein_g: p,
            fat_g: f,
            calories_cal: e,
            source: NutrientSource::Llm,
            raw_response: text.to_string(),
        }),
        _ => {
            let missing: Vec<&str> = ["carbohydrate_g", "protein_g", "fat_g", "calories_cal"]
                .iter()
                .zip(found)
                .filter(|(_, v)| v.is_none())
                .map(|(n, _)| *n)
                .collect();
            Err(DietError::MalformedResponse(format!("missing {}", missing.join(", "))))
        }
    }
}

/// Canonical block for an estimate; [`parse_response`] inverts it exactly.
pub fn render_estimate(e: &NutrientEstimate) -> String {
    format!(
        "{{\ncarbohydrate_g: {},\nprotein_g: {},\nfat_g: {},\ncalories_cal: {}\n}}",
        e.carbohydrate_g, e.protein_g, e.fat_g, e.calories_cal
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn short_keys_in_braces() {
        let e = parse_response("{carb: 56, protein: 4, fat: 0.4, cal: 260}").unwrap();
        assert_eq!(
            (e.carbohydrate_g, e.protein_g, e.fat_g, e.calories_cal),
            (56.0, 4.0, 0.4, 260.0)
        );
    }

    #[test]
    fn reasoning_before_block_is_ignored() {
        let text = "Rice has about 28 g carbs per 100 g.\ncarb: lots\n{\"carbohydrate_g\": 56, \"protein_g\": 5.4, \"fat_g\": 0.6, \"calories_cal\": 260}";
        let e = parse_response(text).unwrap();
        assert_eq!(e.carbohydrate_g, 56.0);
    }

    #[test]
    fn line_block_with_units() {
        let e = parse_response("carbohydrate_g: 12 g\nprotein_g: 3\nfat_g: 1\ncalories_cal: 70 kcal\n").unwrap();
        assert_eq!(e.calories_cal, 70.0);
    }

    #[test]
    fn rejects_words_negative_and_missing() {
        for bad in [
            "{carb: \"a lot\", protein: 4, fat: 0.4, cal: 260}",
            "{carb: 56, protein: 4, fat: -3, cal: 260}",
            "{carb: 56, protein: 4, cal: 260}",
            "{carb: 56, carbs: 57, protein: 4, fat: 1, cal: 260}",
            "I cannot help with that.",
        ] {
            assert!(matches!(parse_response(bad), Err(DietError::MalformedResponse(_))), "{bad}");
        }
    }

    proptest! {
        #[test]
        fn render_then_parse_is_identity(
            c in 0.0f64..1e6, p in 0.0f64..1e6, f in 0.0f64..1e6, e in 0.0f64..1e7,
        ) {
            let est = NutrientEstimate {
                carbohydrate_g: c, protein_g: p, fat_g: f, calories_cal: e,
                source: NutrientSource::Llm, raw_response: String::new(),
            };
            let back = parse_response(&render_estimate(&est)).unwrap();
            prop_assert_eq!(back.carbohydrate_g, c);
            prop_assert_eq!(back.protein_g, p);
            prop_assert_eq!(back.fat_g, f);
            prop_assert_eq!(back.calories_cal, e);
        }
    }
}
