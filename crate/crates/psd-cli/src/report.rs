//! Report emission: every report is written as CSV (one header row) plus a
//! JSON mirror next to it, and all file writes are write-then-rename so a
//! failed command never leaves a partial file behind.

use std::path::{Path, PathBuf};

use crate::CliError;

/// Write bytes to `path` atomically (temp file in the same directory, then
/// rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)
        .map_err(|e| CliError::validation(format!("cannot write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        CliError::validation(format!(
            "cannot rename {} to {}: {e}",
            tmp.display(),
            path.display()
        ))
    })?;
    Ok(())
}

/// Number formatting shared by CSV and JSON: shortest round-trip for finite
/// values, `inf` markers otherwise.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

fn json_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        format!("\"{}\"", fmt_f64(v))
    }
}

/// One value in the JSON mirror.
pub enum JsonValue {
    Num(f64),
    Int(u64),
    Str(String),
    NumList(Vec<f64>),
}

/// Flat JSON object with deterministic field order.
pub fn json_object(fields: &[(&str, JsonValue)]) -> String {
    let mut out = String::from("{\n");
    for (i, (key, value)) in fields.iter().enumerate() {
        out.push_str("  \"");
        out.push_str(key);
        out.push_str("\": ");
        match value {
            JsonValue::Num(v) => out.push_str(&json_f64(*v)),
            JsonValue::Int(v) => out.push_str(&v.to_string()),
            JsonValue::Str(s) => {
                out.push('"');
                out.push_str(s);
                out.push('"');
            }
            JsonValue::NumList(vs) => {
                out.push('[');
                for (j, v) in vs.iter().enumerate() {
                    if j > 0 {
                        out.push_str(", ");
                    }
                    out.push_str(&json_f64(*v));
                }
                out.push(']');
            }
        }
        out.push_str(if i + 1 < fields.len() { ",\n" } else { "\n" });
    }
    out.push_str("}\n");
    out
}

/// Path of the JSON mirror: the output path with its extension replaced by
/// `json`.
pub fn json_mirror_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Write a CSV report and its JSON mirror.
pub fn write_report(
    csv_path: &Path,
    csv: &str,
    json_fields: &[(&str, JsonValue)],
) -> Result<(), CliError> {
    write_atomic(csv_path, csv.as_bytes())?;
    write_atomic(
        &json_mirror_path(csv_path),
        json_object(json_fields).as_bytes(),
    )?;
    Ok(())
}
