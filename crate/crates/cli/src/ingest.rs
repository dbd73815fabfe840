//! Dataset adapters onto the canonical per-patient CSV.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use chrono::{Duration, NaiveDateTime};
use diets_core::pipeline::io::{read_records_file, write_records_file};
use diets_core::pipeline::{build_grid, normalize_units, parse_timestamp, Channel, PipelineError, RawRecord, Route, WindowConfig};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Adapter {
    /// ShanghaiT1DM / ShanghaiT2DM sheets exported to CSV.
    Shanghai,
    /// OhioT1DM XML files.
    Ohio,
    /// Files already in `timestamp,channel,value,unit,route` form.
    Canonical,
}

impl Adapter {
    fn extension(self) -> &'static str {
        match self {
            Adapter::Ohio => "xml",
            _ => "csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSummary {
    pub patient_id: String,
    pub records: usize,
    pub slots: usize,
    pub clips: usize,
    pub glucose_coverage: f64,
    pub missing_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub adapter: Adapter,
    pub patients: Vec<PatientSummary>,
    pub total_clips: usize,
}

impl IngestSummary {
    pub fn render(&self) -> String {
        let mut s = format!(
            "{} patients, {} clips ({:?} adapter)\n{:<24} {:>8} {:>7} {:>7} {:>9} {:>8}\n",
            self.patients.len(),
            self.total_clips,
            self.adapter,
            "patient",
            "records",
            "slots",
            "clips",
            "coverage",
            "missing"
        );
        for p in &self.patients {
            s.push_str(&format!(
                "{:<24} {:>8} {:>7} {:>7} {:>9.3} {:>8.3}\n",
                p.patient_id, p.records, p.slots, p.clips, p.glucose_coverage, p.missing_rate
            ));
        }
        s
    }
}

fn mismatch(file: &Path, row: usize, reason: impl Into<String>) -> CliError {
    CliError::AdapterMismatch {
        file: file.display().to_string(),
        row,
        reason: reason.into(),
    }
}

fn input_files(input: &Path, adapter: Adapter) -> Result<Vec<PathBuf>> {
    let all: Vec<PathBuf> = if input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| CliError::User(format!("{}: {e}", input.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .filter(|p| matches!(p.extension().and_then(|x| x.to_str()), Some("csv" | "xml")))
            .collect();
        v.sort();
        v
    } else if input.is_file() {
        vec![input.to_path_buf()]
    } else {
        return Err(CliError::User(format!("{} does not exist", input.display())));
    };
    if all.is_empty() {
        return Err(CliError::User(format!("no CSV or XML files in {}", input.display())));
    }
    if let Some(other) = all.iter().find(|p| p.extension().and_then(|x| x.to_str()) != Some(adapter.extension())) {
        return Err(mismatch(
            other,
            1,
            format!("the {adapter:?} adapter reads .{} files", adapter.extension()),
        ));
    }
    Ok(all)
}

/// Converts every patient file under `input` and writes canonical CSVs
/// (plus any `<patient>.profile.toml` sidecars) to `out`.
pub fn ingest(input: &Path, adapter: Adapter, out: &Path, window: WindowConfig) -> Result<IngestSummary> {
    let files = input_files(input, adapter)?;
    let mut converted = Vec::new();
    for file in &files {
        let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let (pid, records) = match adapter {
            Adapter::Canonical => (stem.clone(), read_canonical(file)?),
            Adapter::Shanghai => (stem.clone(), read_shanghai(file)?),
            Adapter::Ohio => read_ohio(file, &stem)?,
        };
        if records.is_empty() {
            return Err(mismatch(file, 2, "no records"));
        }
        let records = normalize_units(&records).map_err(|e| CliError::User(format!("{}: {e}", file.display())))?;
        let sidecar = file.with_file_name(format!("{stem}.profile.toml"));
        converted.push((pid, records, sidecar));
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::User(format!("{}: {e}", out.display())))?;
    let mut patients = Vec::new();
    for (pid, mut records, sidecar) in converted {
        records.sort_by_key(|r| r.timestamp);
        let dest = out.join(format!("{pid}.csv"));
        write_records_file(&dest, &records).map_err(|e| CliError::Internal(e.to_string()))?;
        if sidecar.exists() {
            std::fs::copy(&sidecar, out.join(format!("{pid}.profile.toml"))).map_err(|e| CliError::Internal(e.to_string()))?;
        }
        let grid = build_grid(&pid, &records).map_err(|e| CliError::User(format!("{pid}: {e}")))?;
        patients.push(PatientSummary {
            patient_id: pid,
            records: records.len(),
            slots: grid.len(),
            clips: window.clip_count(grid.len()),
            glucose_coverage: grid.glucose_coverage(),
            missing_rate: grid.missing_rate(),
        });
    }
    let summary = IngestSummary {
        adapter,
        total_clips: patients.iter().map(|p| p.clips).sum(),
        patients,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Internal(e.to_string()))?;
    std::fs::write(out.join("summary.json"), json).map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(summary)
}

fn read_canonical(file: &Path) -> Result<Vec<RawRecord>> {
    read_records_file(file).map_err(|e| match e {
        PipelineError::Format { row, reason } => mismatch(file, row, reason),
        other => CliError::User(format!("{}: {other}", file.display())),
    })
}

fn squash(header: &str) -> String {
    header.chars().filter(|c| !c.is_whitespace()).flat_map(char::to_lowercase).collect()
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)(\d+(?:\.\d+)?)\s*(iu|u|mg|g)\b").expect("valid regex"))
}

const LONG_ACTING: [&str; 8] = ["glargine", "detemir", "degludec", "lantus", "levemir", "tresiba", "toujeo", "basaglar"];

/// Amounts with their units in free text such as `Novolin R, 4 IU; glargine 12 IU`.
/// Each `;`-separated entry is classified on its own.
fn amounts(text: &str) -> Vec<(String, f64, String)> {
    text.split([';', '；', '\n'])
        .flat_map(|entry| {
            let lower = entry.to_lowercase();
            number_re()
                .captures_iter(entry)
                .filter_map(|c| Some((lower.clone(), c[1].parse().ok()?, c[2].to_lowercase())))
                .collect::<Vec<_>>()
        })
        .collect()
}

fn read_shanghai(file: &Path) -> Result<Vec<RawRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(file)
        .map_err(|e| CliError::User(format!("{}: {e}", file.display())))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| mismatch(file, 1, e.to_string()))?
        .iter()
        .map(squash)
        .collect();
    let col = |prefix: &str| headers.iter().position(|h| h.starts_with(prefix));
    let (Some(date), Some(cgm)) = (col("date"), col("cgm")) else {
        return Err(mismatch(
            file,
            1,
            format!("expected Date and CGM columns, got {}", headers.join(",")),
        ));
    };
    let cgm_unit = if headers[cgm].contains("mmol") { "mmol/L" } else { "mg/dl" };
    let meal = col("dietaryintake");
    let sc = col("insulindose-s.c");
    let iv = col("insulindose-i.v");
    let csii_bolus = col("csii-bolus");
    let csii_basal = col("csii-basal");
    let agents = col("non-insulin");

    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| mismatch(file, row, e.to_string()))?;
        let field = |c: Option<usize>| c.and_then(|c| rec.get(c)).map(str::trim).filter(|s| !s.is_empty());
        let ts = parse_timestamp(field(Some(date)).unwrap_or("")).map_err(|e| mismatch(file, row, e.to_string()))?;
        rows.push((row, ts, rec.clone()));
    }
    let mut out = Vec::new();
    for (k, (row, ts, rec)) in rows.iter().enumerate() {
        let field = |c: Option<usize>| c.and_then(|c| rec.get(c)).map(str::trim).filter(|s| !s.is_empty());
        let num = |c: Option<usize>| -> Result<Option<f64>> {
            match field(c) {
                None => Ok(None),
                Some(s) => s
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| mismatch(file, *row, format!("non-numeric value {s:?}"))),
            }
        };
        if let Some(g) = num(Some(cgm))? {
            out.push(RawRecord::number(*ts, Channel::Glucose, g, cgm_unit));
        }
        if let Some(text) = field(meal) {
            out.push(RawRecord::text(*ts, text));
        }
        for (column, route) in [(sc, Route::Subcutaneous), (iv, Route::Intravenous)] {
            for (entry, dose, unit) in field(column).map(amounts).unwrap_or_default() {
                if unit != "iu" && unit != "u" {
                    continue;
                }
                let channel = if route == Route::Subcutaneous && LONG_ACTING.iter().any(|n| entry.contains(n)) {
                    Channel::BasalInsulin
                } else {
                    Channel::BolusInsulin
                };
                out.push(RawRecord::number(*ts, channel, dose, "IU").with_route(route));
            }
        }
        if let Some(d) = num(csii_bolus)? {
            out.push(RawRecord::number(*ts, Channel::BolusInsulin, d, "IU").with_route(Route::Subcutaneous));
        }
        if let Some(rate) = num(csii_basal)? {
            // the column is a rate in IU/h held until the next row
            let minutes = rows
                .get(k + 1)
                .map(|(_, next, _)| (*next - *ts).num_minutes().clamp(0, 60))
                .unwrap_or(15);
            if rate > 0.0 && minutes > 0 {
                out.push(
                    RawRecord::number(*ts, Channel::BasalInsulin, rate * minutes as f64 / 60.0, "IU")
                        .with_route(Route::Subcutaneous),
                );
            }
        }
        for (_, amount, unit) in field(agents).map(amounts).unwrap_or_default() {
            if unit == "mg" || unit == "g" {
                out.push(RawRecord::number(*ts, Channel::DrugG, amount, &unit));
            }
        }
    }
    Ok(out)
}

fn ohio_time(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s.trim(), "%d-%m-%Y %H:%M:%S").ok()
}

/// Reads one OhioT1DM XML file. Basal rates are integrated in 5-minute
/// steps; temporary basal rates override the schedule while active.
fn read_ohio(file: &Path, stem: &str) -> Result<(String, Vec<RawRecord>)> {
    let text = std::fs::read_to_string(file).map_err(|e| CliError::User(format!("{}: {e}", file.display())))?;
    let doc = roxmltree::Document::parse(&text).map_err(|e| mismatch(file, e.pos().row as usize, e.to_string()))?;
    let root = doc.root_element();
    if root.tag_name().name() != "patient" {
        return Err(mismatch(
            file,
            doc.text_pos_at(root.range().start).row as usize,
            format!("expected a <patient> root, found <{}>", root.tag_name().name()),
        ));
    }
    let pid = root.attribute("id").map(str::to_string).unwrap_or_else(|| stem.to_string());
    let row_of = |n: roxmltree::Node| doc.text_pos_at(n.range().start).row as usize;
    let events = |section: &str| -> Vec<roxmltree::Node> {
        root.children()
            .filter(|n| n.has_tag_name(section))
            .flat_map(|s| s.children().filter(|e| e.has_tag_name("event")))
            .collect()
    };
    let attr_time = |n: roxmltree::Node, a: &str| -> Result<NaiveDateTime> {
        n.attribute(a)
            .and_then(ohio_time)
            .ok_or_else(|| mismatch(file, row_of(n), format!("missing or bad {a}")))
    };
    let attr_num = |n: roxmltree::Node, a: &str| -> Result<f64> {
        n.attribute(a)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| mismatch(file, row_of(n), format!("missing or bad {a}")))
    };

    let mut out = Vec::new();
    let mut last = None::<NaiveDateTime>;
    for e in events("glucose_level") {
        let ts = attr_time(e, "ts")?;
        out.push(RawRecord::number(ts, Channel::Glucose, attr_num(e, "value")?, "mg/dl"));
        last = last.max(Some(ts));
    }
    for e in events("meal") {
        out.push(RawRecord::number(attr_time(e, "ts")?, Channel::CarbG, attr_num(e, "carbs")?, "g"));
    }
    let step = Duration::minutes(5);
    for e in events("bolus") {
        let begin = attr_time(e, "ts_begin")?;
        let end = e.attribute("ts_end").and_then(ohio_time).unwrap_or(begin);
        let dose = attr_num(e, "dose")?;
        let steps = ((end - begin).num_minutes() / 5).max(1);
        for k in 0..steps {
            out.push(
                RawRecord::number(begin + step * k as i32, Channel::BolusInsulin, dose / steps as f64, "IU")
                    .with_route(Route::Subcutaneous),
            );
        }
    }
    let mut schedule = events("basal")
        .into_iter()
        .map(|e| Ok((attr_time(e, "ts")?, attr_num(e, "value")?)))
        .collect::<Result<Vec<_>>>()?;
    schedule.sort_by_key(|s| s.0);
    let temps = events("temp_basal")
        .into_iter()
        .map(|e| Ok((attr_time(e, "ts_begin")?, attr_time(e, "ts_end")?, attr_num(e, "value")?)))
        .collect::<Result<Vec<_>>>()?;
    if let (Some(first), Some(end)) = (schedule.first().map(|s| s.0), last) {
        let mut t = first;
        let mut idx = 0;
        while t < end {
            while idx + 1 < schedule.len() && schedule[idx + 1].0 <= t {
                idx += 1;
            }
            let rate = temps
                .iter()
                .find(|(b, e, _)| *b <= t && t < *e)
                .map_or(schedule[idx].1, |tb| tb.2);
            if rate > 0.0 {
                out.push(RawRecord::number(t, Channel::BasalInsulin, rate * 5.0 / 60.0, "IU").with_route(Route::Subcutaneous));
            }
            t += step;
        }
    }
    Ok((pid, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dose_text() {
        let a = amounts("Novolin R, 4 IU; insulin glargine, 12 IU");
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].1, 4.0);
        assert!(a[1].0.contains("glargine"));
        assert_eq!(amounts("acarbose 50 mg")[0].2, "mg");
        assert!(amounts("none").is_empty());
    }
}
