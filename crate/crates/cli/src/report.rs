use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// A tab-separated table with a JSON sidecar carrying the same rows plus
/// run metadata.
pub struct Report {
    pub name: &'static str,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Report {
    pub fn new(name: &'static str, header: &[&str]) -> Self {
        Self {
            name,
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_tsv(&self) -> String {
        let mut out = self.header.join("\t");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|c| c.replace(['\t', '\n'], " ")).collect();
            let _ = writeln!(out, "{}", cells.join("\t"));
        }
        out
    }

    /// Writes `<out>/<name>.tsv` and `<out>/<name>.json`; returns the table path.
    pub fn write<M: Serialize>(&self, out: &Path, meta: &M) -> Result<PathBuf> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let table = out.join(format!("{}.tsv", self.name));
        std::fs::write(&table, self.to_tsv()).with_context(|| format!("writing {}", table.display()))?;
        let rows: Vec<serde_json::Map<String, serde_json::Value>> = self
            .rows
            .iter()
            .map(|r| {
                self.header
                    .iter()
                    .zip(r)
                    .map(|(h, c)| (h.clone(), cell_json(c)))
                    .collect()
            })
            .collect();
        let sidecar = serde_json::json!({ "report": self.name, "meta": meta, "rows": rows });
        let path = out.join(format!("{}.json", self.name));
        let mut text = serde_json::to_string_pretty(&sidecar)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(table)
    }
}

// Numeric cells become JSON numbers so plotters need no parsing step.
fn cell_json(cell: &str) -> serde_json::Value {
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => serde_json::json!(v),
        _ => serde_json::Value::String(cell.to_string()),
    }
}

pub fn num(v: f64) -> String {
    format!("{v:.6}")
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_else(|| "-".into())
}
