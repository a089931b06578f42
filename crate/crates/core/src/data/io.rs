//! JSON Lines storage, one [`SampleRecord`] per line.
//!
//! Each line is an object with fields `id` (string), `split`
//! (`"train"|"valid"|"test"`), `text` (array of token ids), `vision` and
//! `audio` (arrays of equal-width float rows), optional `y_t`, `y_v`, `y_a`
//! unimodal labels and the multimodal label `y`. Blank lines are ignored.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{LabelRange, SampleRecord};
use crate::error::{KudaError, Result};

pub fn to_jsonl(records: &[SampleRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn store_jsonl(path: impl AsRef<Path>, records: &[SampleRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_jsonl(records)?.as_bytes())?;
    Ok(())
}

pub fn load_jsonl(path: impl AsRef<Path>, range: LabelRange) -> Result<Vec<SampleRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_jsonl(&text, path, range)
}

/// Parses and validates JSON Lines text; `path` is only used in error messages.
pub fn parse_jsonl(text: &str, path: &Path, range: LabelRange) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |field: &str, message: String| KudaError::Record {
            path: PathBuf::from(path),
            line: i + 1,
            field: field.to_owned(),
            message,
        };
        let record: SampleRecord = serde_json::from_str(line).map_err(|e| {
            let msg = e.to_string();
            let field = field_from_serde_message(&msg)
                .unwrap_or("<record>")
                .to_owned();
            err(&field, msg)
        })?;
        validate(&record, range).map_err(|(field, message)| err(field, message))?;
        out.push(record);
    }
    Ok(out)
}

fn field_from_serde_message(msg: &str) -> Option<&str> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(&msg[start..start + len])
}

fn validate(
    r: &SampleRecord,
    range: LabelRange,
) -> std::result::Result<(), (&'static str, String)> {
    let labels = [
        ("y", Some(r.y)),
        ("y_t", r.y_t),
        ("y_v", r.y_v),
        ("y_a", r.y_a),
    ];
    for (field, value) in labels {
        if let Some(v) = value {
            if !range.contains(v) {
                return Err((
                    field,
                    format!("label {v} outside [-{b}, {b}]", b = range.bound()),
                ));
            }
        }
    }
    if r.text.is_empty() {
        return Err(("text", "empty token sequence".into()));
    }
    for (field, rows) in [("vision", &r.vision), ("audio", &r.audio)] {
        let width = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || width == 0 {
            return Err((field, "empty feature sequence".into()));
        }
        if rows.iter().any(|row| row.len() != width) {
            return Err((field, "rows have different widths".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err((field, "non-finite feature value".into()));
        }
    }
    Ok(())
}
