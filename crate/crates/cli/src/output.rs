//! Tabular output shared by every subcommand: CSV with one header row, or a
//! JSON array of row objects with the same keys.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::Deserialize;
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn render(&self, format: Format) -> Result<Vec<u8>> {
        match format {
            Format::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(&self.columns)?;
                for row in &self.rows {
                    w.write_record(row.iter().map(cell))?;
                }
                Ok(w.into_inner()?)
            }
            Format::Json => {
                let objects: Vec<Value> = self
                    .rows
                    .iter()
                    .map(|row| {
                        let map: Map<String, Value> = self
                            .columns
                            .iter()
                            .cloned()
                            .zip(row.iter().cloned())
                            .collect();
                        Value::Object(map)
                    })
                    .collect();
                let mut bytes = serde_json::to_vec_pretty(&objects)?;
                bytes.push(b'\n');
                Ok(bytes)
            }
        }
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

/// Where a command's output goes: `--out` if given, else a file named after
/// the command inside the output directory, else stdout.
pub fn destination(
    out: Option<&Path>,
    out_dir: Option<&Path>,
    stem: &str,
    ext: &str,
) -> Option<PathBuf> {
    if let Some(p) = out {
        return Some(p.to_path_buf());
    }
    out_dir
        .filter(|d| !d.as_os_str().is_empty())
        .map(|d| d.join(format!("{stem}.{ext}")))
}

pub fn write_bytes(bytes: &[u8], dest: Option<&Path>) -> Result<()> {
    match dest {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
            Ok(())
        }
    }
}

/// Output location and format options common to every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Sink {
    pub format: Format,
    pub out: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Sink {
    pub fn emit(&self, table: &Table, stem: &str) -> Result<()> {
        let bytes = table.render(self.format)?;
        let dest = destination(
            self.out.as_deref(),
            self.out_dir.as_deref(),
            stem,
            self.format.extension(),
        );
        write_bytes(&bytes, dest.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn table() -> Table {
        let mut t = Table::new(["mode", "loss"]);
        t.push(vec![json!("after"), json!(0.25)]);
        t.push(vec![json!("before"), json!(1e-7)]);
        t
    }

    #[test]
    fn csv_has_one_header() {
        let s = String::from_utf8(table().render(Format::Csv).unwrap()).unwrap();
        assert_eq!(s, "mode,loss\nafter,0.25\nbefore,1e-7\n");
    }

    #[test]
    fn out_flag_beats_out_dir() {
        let dir = Path::new("/tmp/x");
        assert_eq!(
            destination(Some(Path::new("a.csv")), Some(dir), "balance", "csv"),
            Some("a.csv".into())
        );
        assert_eq!(
            destination(None, Some(dir), "balance", "csv"),
            Some(dir.join("balance.csv"))
        );
        assert_eq!(destination(None, None, "balance", "csv"), None);
    }

    #[test]
    fn json_keeps_column_order() {
        let s = String::from_utf8(table().render(Format::Json).unwrap()).unwrap();
        let v: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v[1]["mode"], "before");
        assert!(s.find("\"mode\"").unwrap() < s.find("\"loss\"").unwrap());
    }
}
