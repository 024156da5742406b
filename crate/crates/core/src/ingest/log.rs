//! Clickstream log readers.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::events::{QuestionType, RawEvent};
use super::replay::MutationTable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LogFormat {
    #[default]
    Delimited,
    JsonLines,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnNames {
    pub student_id: String,
    pub question_id: String,
    pub question_type: String,
    pub event_type: String,
    pub timestamp: String,
    pub extra: String,
}

impl Default for ColumnNames {
    fn default() -> Self {
        Self {
            student_id: "student_id".into(),
            question_id: "question_id".into(),
            question_type: "question_type".into(),
            event_type: "event_type".into(),
            timestamp: "timestamp_seconds".into(),
            extra: "extra_json".into(),
        }
    }
}

/// How to read a log and how its events mutate response state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogSchema {
    pub format: LogFormat,
    pub delimiter: char,
    pub columns: ColumnNames,
    pub mutations: MutationTable,
}

impl Default for LogSchema {
    fn default() -> Self {
        Self {
            format: LogFormat::Delimited,
            delimiter: ',',
            columns: ColumnNames::default(),
            mutations: MutationTable::standard(),
        }
    }
}

impl LogSchema {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

/// A row that could not be turned into an event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    pub row: usize,
    pub column: String,
    pub message: String,
}

/// Events grouped per student (sorted by id), each group in timestamp order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedLog {
    pub students: BTreeMap<String, Vec<RawEvent>>,
    pub errors: Vec<RowError>,
}

impl ParsedLog {
    pub fn event_count(&self) -> usize {
        self.students.values().map(Vec::len).sum()
    }
}

pub fn parse_log(path: &Path, schema: &LogSchema) -> Result<ParsedLog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_reader(file, schema)
}

pub fn parse_reader<R: Read>(reader: R, schema: &LogSchema) -> Result<ParsedLog> {
    let rows = match schema.format {
        LogFormat::Delimited => read_delimited(reader, schema)?,
        LogFormat::JsonLines => read_json_lines(reader, schema)?,
    };
    let mut parsed = ParsedLog::default();
    for row in rows {
        match row {
            Ok(event) => parsed
                .students
                .entry(event.student_id.clone())
                .or_default()
                .push(event),
            Err(e) => parsed.errors.push(e),
        }
    }
    for events in parsed.students.values_mut() {
        // stable: ties keep log order
        events.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    }
    Ok(parsed)
}

struct Fields<'a> {
    student_id: &'a str,
    question_id: &'a str,
    question_type: &'a str,
    event_type: &'a str,
    timestamp: &'a str,
    extra: &'a str,
}

fn build_event(row: usize, f: Fields<'_>, cols: &ColumnNames) -> Result<RawEvent, RowError> {
    let err = |column: &str, message: String| RowError {
        row,
        column: column.to_string(),
        message,
    };
    if f.student_id.trim().is_empty() {
        return Err(err(&cols.student_id, "empty student id".into()));
    }
    if f.question_id.trim().is_empty() {
        return Err(err(&cols.question_id, "empty question id".into()));
    }
    if f.event_type.trim().is_empty() {
        return Err(err(&cols.event_type, "empty event type".into()));
    }
    let question_type: QuestionType = f
        .question_type
        .parse()
        .map_err(|m| err(&cols.question_type, m))?;
    let timestamp: f64 = f
        .timestamp
        .trim()
        .parse()
        .map_err(|_| err(&cols.timestamp, format!("non-numeric timestamp `{}`", f.timestamp)))?;
    if !timestamp.is_finite() || timestamp < 0.0 {
        return Err(err(&cols.timestamp, format!("timestamp {timestamp} must be finite and >= 0")));
    }
    let extra = parse_extra(f.extra).map_err(|m| err(&cols.extra, m))?;
    Ok(RawEvent {
        student_id: f.student_id.trim().to_string(),
        question_id: f.question_id.trim().to_string(),
        question_type,
        event_type: f.event_type.trim().to_string(),
        timestamp,
        extra,
        row,
    })
}

fn parse_extra(text: &str) -> Result<BTreeMap<String, String>, String> {
    let text = text.trim();
    if text.is_empty() {
        return Ok(BTreeMap::new());
    }
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| format!("invalid extra JSON: {e}"))?;
    let serde_json::Value::Object(map) = value else {
        return Err("extra JSON must be an object".into());
    };
    Ok(map
        .into_iter()
        .map(|(k, v)| {
            let v = match v {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            (k, v)
        })
        .collect())
}

fn read_delimited<R: Read>(reader: R, schema: &LogSchema) -> Result<Vec<Result<RawEvent, RowError>>> {
    let delimiter = u8::try_from(schema.delimiter)
        .map_err(|_| Error::Config(format!("delimiter `{}` is not ASCII", schema.delimiter)))?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .has_headers(false)
        .from_reader(reader);
    let mut records = rdr.records();
    let Some(header) = records.next() else {
        return Ok(Vec::new());
    };
    let header = header.map_err(|e| Error::Parse {
        row: 1,
        column: String::new(),
        message: e.to_string(),
    })?;
    let cols = &schema.columns;
    let position = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Parse {
                row: 1,
                column: name.to_string(),
                message: "missing required column in header".into(),
            })
    };
    let idx = [
        position(&cols.student_id)?,
        position(&cols.question_id)?,
        position(&cols.question_type)?,
        position(&cols.event_type)?,
        position(&cols.timestamp)?,
        position(&cols.extra)?,
    ];
    let names = [
        &cols.student_id,
        &cols.question_id,
        &cols.question_type,
        &cols.event_type,
        &cols.timestamp,
        &cols.extra,
    ];

    let mut out = Vec::new();
    for (i, record) in records.enumerate() {
        let row = i + 2;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                out.push(Err(RowError {
                    row,
                    column: String::new(),
                    message: e.to_string(),
                }));
                continue;
            }
        };
        if record.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let mut vals = [""; 6];
        let mut missing = None;
        for (k, &j) in idx.iter().enumerate() {
            match record.get(j) {
                Some(v) => vals[k] = v,
                // an absent trailing extra column is treated as empty
                None if k == 5 => vals[k] = "",
                None => {
                    missing = Some(names[k]);
                    break;
                }
            }
        }
        if let Some(column) = missing {
            out.push(Err(RowError {
                row,
                column: column.clone(),
                message: "missing required column".into(),
            }));
            continue;
        }
        out.push(build_event(
            row,
            Fields {
                student_id: vals[0],
                question_id: vals[1],
                question_type: vals[2],
                event_type: vals[3],
                timestamp: vals[4],
                extra: vals[5],
            },
            cols,
        ));
    }
    Ok(out)
}

fn read_json_lines<R: Read>(reader: R, schema: &LogSchema) -> Result<Vec<Result<RawEvent, RowError>>> {
    let cols = &schema.columns;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let row = i + 1;
        let line = line.map_err(|e| Error::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                out.push(Err(RowError {
                    row,
                    column: String::new(),
                    message: format!("invalid JSON record: {e}"),
                }));
                continue;
            }
        };
        let text = |name: &str| -> Option<String> {
            match value.get(name)? {
                serde_json::Value::String(s) => Some(s.clone()),
                serde_json::Value::Null => None,
                other => Some(other.to_string()),
            }
        };
        let required = [
            &cols.student_id,
            &cols.question_id,
            &cols.question_type,
            &cols.event_type,
            &cols.timestamp,
        ];
        if let Some(missing) = required.iter().find(|c| text(c).is_none()) {
            out.push(Err(RowError {
                row,
                column: (*missing).clone(),
                message: "missing required column".into(),
            }));
            continue;
        }
        let extra = match value.get(&cols.extra) {
            None | Some(serde_json::Value::Null) => String::new(),
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(other) => other.to_string(),
        };
        let (s, q, qt, et, ts) = (
            text(&cols.student_id).unwrap_or_default(),
            text(&cols.question_id).unwrap_or_default(),
            text(&cols.question_type).unwrap_or_default(),
            text(&cols.event_type).unwrap_or_default(),
            text(&cols.timestamp).unwrap_or_default(),
        );
        out.push(build_event(
            row,
            Fields {
                student_id: &s,
                question_id: &q,
                question_type: &qt,
                event_type: &et,
                timestamp: &ts,
                extra: &extra,
            },
            cols,
        ));
    }
    Ok(out)
}

/// Write events in the delimited format [`parse_log`] reads with the default schema.
pub fn write_delimited<W: std::io::Write>(writer: W, events: &[RawEvent]) -> Result<()> {
    let cols = ColumnNames::default();
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Data(format!("writing log: {e}"));
    w.write_record([
        &cols.student_id,
        &cols.question_id,
        &cols.question_type,
        &cols.event_type,
        &cols.timestamp,
        &cols.extra,
    ])
    .map_err(io)?;
    for e in events {
        let extra = if e.extra.is_empty() {
            String::new()
        } else {
            serde_json::to_string(&e.extra).expect("string map serializes")
        };
        w.write_record([
            e.student_id.as_str(),
            e.question_id.as_str(),
            e.question_type.as_str(),
            e.event_type.as_str(),
            &format_seconds(e.timestamp),
            &extra,
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::Data(format!("writing log: {e}")))?;
    Ok(())
}

/// Shortest text that parses back to the same `f64`.
pub fn format_seconds(t: f64) -> String {
    format!("{t}")
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "student_id,question_id,question_type,event_type,timestamp_seconds,extra_json\n";

    fn parse(text: &str) -> ParsedLog {
        parse_reader(text.as_bytes(), &LogSchema::default()).unwrap()
    }

    #[test]
    fn three_rows_one_student_sorted() {
        let text = format!(
            "{HEADER}s1,Q1,multiple_choice,enter_item,2.5,\ns1,Q1,multiple_choice,select_option,1.0,\"{{\"\"field\"\":\"\"choice\"\",\"\"value\"\":\"\"A\"\"}}\"\ns1,Q2,fill_in,enter_item,4,\n"
        );
        let parsed = parse(&text);
        assert!(parsed.errors.is_empty(), "{:?}", parsed.errors);
        let events = &parsed.students["s1"];
        assert_eq!(events.len(), 3);
        let ts: Vec<f64> = events.iter().map(|e| e.timestamp).collect();
        assert_eq!(ts, vec![1.0, 2.5, 4.0]);
        assert_eq!(events[0].extra["value"], "A");
    }

    #[test]
    fn empty_file_is_empty() {
        let parsed = parse("");
        assert!(parsed.students.is_empty());
        assert!(parsed.errors.is_empty());
    }

    #[test]
    fn non_numeric_timestamp_is_reported() {
        let parsed = parse(&format!("{HEADER}s1,Q1,fill_in,enter_item,abc,\n"));
        assert_eq!(parsed.event_count(), 0);
        assert_eq!(parsed.errors.len(), 1);
        assert_eq!(parsed.errors[0].row, 2);
        assert_eq!(parsed.errors[0].column, "timestamp_seconds");
    }

    #[test]
    fn missing_header_column_is_fatal() {
        let err = parse_reader(
            "student_id,question_id,question_type,event_type,extra_json\n".as_bytes(),
            &LogSchema::default(),
        )
        .unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 1);
                assert_eq!(column, "timestamp_seconds");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_row_names_missing_column() {
        let parsed = parse(&format!("{HEADER}s1,Q1,fill_in\n"));
        assert_eq!(parsed.errors.len(), 1);
        assert_eq!(parsed.errors[0].column, "event_type");
    }

    #[test]
    fn timestamp_ties_keep_log_order() {
        let parsed = parse(&format!(
            "{HEADER}s1,Q1,fill_in,b,1,\ns1,Q1,fill_in,a,1,\ns1,Q1,fill_in,c,0,\n"
        ));
        let types: Vec<&str> = parsed.students["s1"]
            .iter()
            .map(|e| e.event_type.as_str())
            .collect();
        assert_eq!(types, vec!["c", "b", "a"]);
    }

    #[test]
    fn json_lines_records() {
        let schema = LogSchema {
            format: LogFormat::JsonLines,
            ..LogSchema::default()
        };
        let text = r#"{"student_id":"s2","question_id":"Q1","question_type":"matching","event_type":"drag_match","timestamp_seconds":3.5,"extra_json":{"field":"m1","value":"x"}}
{"student_id":"s2","question_id":"Q1","question_type":"matching","event_type":"enter_item","timestamp_seconds":"1"}
{"student_id":"s2","question_id":"Q1","event_type":"enter_item","timestamp_seconds":"1"}
"#;
        let parsed = parse_reader(text.as_bytes(), &schema).unwrap();
        assert_eq!(parsed.students["s2"].len(), 2);
        assert_eq!(parsed.students["s2"][1].extra["field"], "m1");
        assert_eq!(parsed.errors.len(), 1);
        assert_eq!(parsed.errors[0].column, "question_type");
    }

    #[test]
    fn write_then_read_preserves_events() {
        let parsed = parse(&format!(
            "{HEADER}s1,Q1,fill_in,type_text,0.1,\"{{\"\"field\"\":\"\"f1\"\",\"\"value\"\":\"\"4,2\"\"}}\"\n"
        ));
        let events = parsed.students["s1"].clone();
        let mut buf = Vec::new();
        write_delimited(&mut buf, &events).unwrap();
        let again = parse(std::str::from_utf8(&buf).unwrap());
        assert_eq!(again.students["s1"], events);
    }
}
