//! Rendering of command results on stdout.

use std::io::Write;

use roikit::{Error, Result};
use serde_json::Value;

use crate::Format;

pub enum Output {
    /// Summary rendered according to `--format`.
    Json(Value),
    /// Bytes written to stdout unchanged.
    Raw(Vec<u8>),
}

/// `key,value` rows, nested keys joined with `.` and array items indexed.
pub fn flatten(value: &Value) -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &Value, rows: &mut Vec<(String, String)>) {
        let key = |k: &str| {
            if prefix.is_empty() {
                k.to_string()
            } else {
                format!("{prefix}.{k}")
            }
        };
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, child) in m {
                    walk(&key(k), child, rows);
                }
            }
            Value::Array(a) if !a.is_empty() => {
                for (i, child) in a.iter().enumerate() {
                    walk(&key(&i.to_string()), child, rows);
                }
            }
            Value::String(s) => rows.push((prefix.to_string(), s.clone())),
            Value::Null => rows.push((prefix.to_string(), String::new())),
            other => rows.push((prefix.to_string(), other.to_string())),
        }
    }
    let mut rows = Vec::new();
    walk("", value, &mut rows);
    rows
}

fn render(out: Output, format: Format) -> Result<Vec<u8>> {
    let fail = |e: String| Error::invalid(format!("cannot render output: {e}"));
    match (out, format) {
        (Output::Raw(bytes), _) => Ok(bytes),
        (Output::Json(v), Format::Json) => {
            let mut bytes = serde_json::to_vec_pretty(&v).map_err(|e| fail(e.to_string()))?;
            bytes.push(b'\n');
            Ok(bytes)
        }
        (Output::Json(v), Format::Csv) => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["key", "value"]).map_err(|e| fail(e.to_string()))?;
            for (k, val) in flatten(&v) {
                w.write_record([k, val]).map_err(|e| fail(e.to_string()))?;
            }
            w.into_inner().map_err(|e| fail(e.to_string()))
        }
    }
}

pub fn emit(out: Output, format: Format) -> Result<()> {
    let bytes = render(out, format)?;
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(&bytes)
        .and_then(|_| stdout.flush())
        .map_err(|e| Error::invalid(format!("cannot write to stdout: {e}")))
}
