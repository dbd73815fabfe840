//! Canonical per-patient CSV: `timestamp,channel,value,unit,route`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::record::{format_timestamp, parse_timestamp, Channel, RawRecord, RecordValue, Route};
use super::PipelineError;

pub const CANONICAL_HEADER: [&str; 5] = ["timestamp", "channel", "value", "unit", "route"];

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    timestamp: String,
    channel: String,
    value: String,
    unit: String,
    #[serde(default)]
    route: String,
}

pub fn read_records<R: Read>(reader: R) -> Result<Vec<RawRecord>, PipelineError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let expected: Vec<&str> = CANONICAL_HEADER.to_vec();
    let got: Vec<&str> = headers.iter().collect();
    if got.len() < 4 || got[..4] != expected[..4] {
        return Err(PipelineError::Format {
            row: 1,
            reason: format!("expected header {}, got {}", expected.join(","), got.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| PipelineError::Format {
            row: line,
            reason: e.to_string(),
        })?;
        let at_row = |e: PipelineError| PipelineError::Format {
            row: line,
            reason: e.to_string(),
        };
        let timestamp = parse_timestamp(&row.timestamp).map_err(at_row)?;
        let channel: Channel = row.channel.parse().map_err(at_row)?;
        let value = if channel == Channel::MealText {
            RecordValue::Text(row.value)
        } else {
            RecordValue::Number(row.value.parse::<f64>().map_err(|_| PipelineError::Format {
                row: line,
                reason: format!("non-numeric value {:?}", row.value),
            })?)
        };
        let route = if row.route.is_empty() {
            None
        } else {
            Some(row.route.parse::<Route>().map_err(at_row)?)
        };
        out.push(RawRecord {
            timestamp,
            channel,
            value,
            unit: row.unit,
            route,
        });
    }
    Ok(out)
}

pub fn read_records_file(path: &Path) -> Result<Vec<RawRecord>, PipelineError> {
    let f = std::fs::File::open(path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    read_records(f)
}

pub fn write_records<W: Write>(writer: W, records: &[RawRecord]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CANONICAL_HEADER).map_err(csv_err)?;
    for r in records {
        let value = match &r.value {
            RecordValue::Number(v) => v.to_string(),
            RecordValue::Text(t) => t.clone(),
        };
        let route = r.route.map(|r| r.to_string()).unwrap_or_default();
        w.write_record([
            format_timestamp(&r.timestamp),
            r.channel.to_string(),
            value,
            r.unit.clone(),
            route,
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| PipelineError::Io(e.to_string()))?;
    Ok(())
}

pub fn write_records_file(path: &Path, records: &[RawRecord]) -> Result<(), PipelineError> {
    let f = std::fs::File::create(path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    write_records(f, records)
}

fn csv_err(e: csv::Error) -> PipelineError {
    PipelineError::Io(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_canonical_csv() {
        let text = "timestamp,channel,value,unit,route\n\
                    2024-01-01T08:00:00,glucose,5.5,mmol/l,\n\
                    2024-01-01T08:05:00,bolus_insulin,4,IU,subcutaneous\n\
                    2024-01-01T08:05:00,meal_text,\"rice, 200 g\",text,\n";
        let recs = read_records(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[1].route, Some(Route::Subcutaneous));
        assert_eq!(recs[2].value, RecordValue::Text("rice, 200 g".into()));

        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        assert_eq!(read_records(buf.as_slice()).unwrap(), recs);
    }

    #[test]
    fn bad_row_reports_line() {
        let text = "timestamp,channel,value,unit,route\n2024-01-01T08:00:00,glucose,abc,mg/dl,\n";
        match read_records(text.as_bytes()) {
            Err(PipelineError::Format { row, .. }) => assert_eq!(row, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_header_rejected() {
        let text = "Date,CGM (mg / dl)\n2024-01-01 08:00,100\n";
        assert!(matches!(
            read_records(text.as_bytes()),
            Err(PipelineError::Format { row: 1, .. })
        ));
    }
}
