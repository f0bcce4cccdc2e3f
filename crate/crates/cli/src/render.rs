//! Report output. A report serializes to a JSON object; each field holding
//! an array of objects becomes a table (or one JSONL record per element),
//! and the remaining fields form a summary.

use std::io::Write;

use anyhow::Result;
use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Table,
    Jsonl,
    Both,
}

fn is_table(v: &Value) -> bool {
    matches!(v, Value::Array(a) if !a.is_empty() && a.iter().all(Value::is_object))
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => "-".into(),
        Value::String(s) => s.clone(),
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap_or(f64::NAN);
            if x != 0.0 && (x.abs() < 1e-3 || x.abs() >= 1e7) {
                format!("{x:.4e}")
            } else {
                format!("{x:.4}")
            }
        }
        other => other.to_string(),
    }
}

fn write_table(out: &mut impl Write, name: &str, rows: &[Value]) -> Result<()> {
    let mut cols: Vec<String> = Vec::new();
    for r in rows {
        for k in r.as_object().into_iter().flat_map(Map::keys) {
            if !cols.contains(k) {
                cols.push(k.clone());
            }
        }
    }
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| cols.iter().map(|c| cell(r.get(c).unwrap_or(&Value::Null))).collect())
        .collect();
    let widths: Vec<usize> = cols
        .iter()
        .enumerate()
        .map(|(i, c)| body.iter().map(|r| r[i].len()).chain([c.len()]).max().unwrap_or(0))
        .collect();
    writeln!(out, "[{name}]")?;
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    writeln!(out, "{}", line(&cols))?;
    for r in &body {
        writeln!(out, "{}", line(r))?;
    }
    writeln!(out)?;
    Ok(())
}

pub fn emit(out: &mut impl Write, format: Format, report: &str, value: &impl Serialize) -> Result<()> {
    let v = serde_json::to_value(value)?;
    let Value::Object(fields) = v else {
        anyhow::bail!("report {report} is not an object");
    };
    let mut summary = Map::new();
    let mut tables = Vec::new();
    for (k, v) in fields {
        if is_table(&v) {
            tables.push((k, v));
        } else {
            summary.insert(k, v);
        }
    }
    if matches!(format, Format::Table | Format::Both) {
        writeln!(out, "== {report} ==")?;
        let width = summary.keys().map(String::len).max().unwrap_or(0);
        for (k, v) in &summary {
            let text = if v.is_object() || v.is_array() { v.to_string() } else { cell(v) };
            writeln!(out, "{k:<width$}  {text}")?;
        }
        writeln!(out)?;
        for (k, v) in &tables {
            write_table(out, k, v.as_array().map(Vec::as_slice).unwrap_or(&[]))?;
        }
    }
    if matches!(format, Format::Jsonl | Format::Both) {
        for (k, v) in &tables {
            for row in v.as_array().into_iter().flatten() {
                let mut rec = Map::new();
                rec.insert("report".into(), report.into());
                rec.insert("record".into(), k.as_str().into());
                if let Value::Object(o) = row {
                    rec.extend(o.clone());
                }
                writeln!(out, "{}", Value::Object(rec))?;
            }
        }
        let mut rec = Map::new();
        rec.insert("report".into(), report.into());
        rec.insert("record".into(), "summary".into());
        rec.extend(summary);
        writeln!(out, "{}", Value::Object(rec))?;
    }
    Ok(())
}
