//! Experiment reports and their on-disk form.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{Experiment, ExperimentConfig};
use crate::error::{invalid, Error, Result};

/// One table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
}

impl Cell {
    /// CSV rendering; floats use the shortest representation that round-trips.
    pub fn render(&self) -> String {
        match self {
            Cell::Bool(b) => b.to_string(),
            Cell::Int(i) => i.to_string(),
            Cell::Float(f) => f.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}
impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}
impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}
impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}
impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}
impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width of table {}", self.name);
        self.rows.push(row);
    }

    /// Index of a column by name.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub tool_version: String,
    pub experiment: Experiment,
    /// The resolved config the run used.
    pub config: ExperimentConfig,
    pub summary: BTreeMap<String, serde_json::Value>,
    pub tables: Vec<Table>,
    /// True when a certified bound or a proven property failed.
    pub violation: bool,
    pub wall_clock_seconds: f64,
}

impl ExperimentReport {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `report.json` and one `<table>.csv` per table into `out_dir`, creating it if
/// needed. Existing files are only replaced with `force`.
pub fn write_report(report: &ExperimentReport, out_dir: &Path, force: bool) -> Result<Vec<PathBuf>> {
    let mut paths = vec![out_dir.join("report.json")];
    paths.extend(report.tables.iter().map(|t| out_dir.join(format!("{}.csv", t.name))));
    if !force {
        if let Some(existing) = paths.iter().find(|p| p.exists()) {
            return Err(Error::Refused(format!(
                "{} exists; pass --force to overwrite",
                existing.display()
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let json = serde_json::to_string_pretty(report)
        .map_err(|e| invalid("report", format!("cannot serialize: {e}")))?;
    fs::write(&paths[0], json + "\n").map_err(io_err(&paths[0]))?;

    for (table, path) in report.tables.iter().zip(&paths[1..]) {
        let csv_err = |source| Error::Csv {
            path: path.clone(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(&table.columns).map_err(csv_err)?;
        for row in &table.rows {
            w.write_record(row.iter().map(Cell::render)).map_err(csv_err)?;
        }
        w.flush().map_err(io_err(path))?;
    }
    Ok(paths)
}
