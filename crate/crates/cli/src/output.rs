//! JSON and CSV emission. Floats carry 17 significant digits so reruns are
//! byte-identical and values round-trip.

use anyhow::{Context, Result};
use serde_json::Value;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

pub fn float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn number(n: &serde_json::Number) -> String {
    if n.is_f64() {
        float(n.as_f64().unwrap_or(f64::NAN))
    } else {
        n.to_string()
    }
}

fn write_json(out: &mut String, v: &Value, indent: usize) {
    let pad = "  ".repeat(indent + 1);
    let close = "  ".repeat(indent);
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => out.push_str(&number(n)),
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(a) if a.is_empty() => out.push_str("[]"),
        Value::Array(a) if a.iter().all(|x| !x.is_object() && !x.is_array()) => {
            out.push('[');
            for (i, x) in a.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_json(out, x, indent);
            }
            out.push(']');
        }
        Value::Array(a) => {
            out.push_str("[\n");
            for (i, x) in a.iter().enumerate() {
                out.push_str(&pad);
                write_json(out, x, indent + 1);
                out.push_str(if i + 1 < a.len() { ",\n" } else { "\n" });
            }
            let _ = write!(out, "{close}]");
        }
        Value::Object(m) if m.is_empty() => out.push_str("{}"),
        Value::Object(m) => {
            out.push_str("{\n");
            for (i, (k, x)) in m.iter().enumerate() {
                let _ = write!(out, "{pad}{}: ", Value::String(k.clone()));
                write_json(out, x, indent + 1);
                out.push_str(if i + 1 < m.len() { ",\n" } else { "\n" });
            }
            let _ = write!(out, "{close}}}");
        }
    }
}

pub fn to_json(v: &Value) -> String {
    let mut s = String::new();
    write_json(&mut s, v, 0);
    s.push('\n');
    s
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => number(n),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One row per record; columns are `columns` in order, missing keys left blank.
pub fn to_csv(records: &[Value], columns: &[&str]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(columns)?;
    for r in records {
        w.write_record(columns.iter().map(|c| r.get(*c).map(cell).unwrap_or_default()))?;
    }
    Ok(String::from_utf8(w.into_inner().context("flushing csv")?)?)
}

pub fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn floats_have_17_digits() {
        assert_eq!(float(0.1), "1.0000000000000001e-1");
        assert_eq!(float(1.0), "1.0000000000000000e0");
        let s = to_json(&json!({"a": 0.5, "n": 3, "v": [1.5, 2]}));
        assert_eq!(s, "{\n  \"a\": 5.0000000000000000e-1,\n  \"n\": 3,\n  \"v\": [1.5000000000000000e0, 2]\n}\n");
        let back: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["a"], json!(0.5));
    }

    #[test]
    fn csv_blank_for_missing() {
        let s = to_csv(&[json!({"a": 1, "b": "x"}), json!({"a": 2})], &["a", "b"]).unwrap();
        assert_eq!(s, "a,b\n1,x\n2,\n");
    }
}
