use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Output directory of one run.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: PathBuf) -> Result<Self, CliError> {
        std::fs::create_dir_all(&root)
            .map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
        Ok(Self { root })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes `value` as pretty JSON with a top-level `schema_version`.
    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut v = serde_json::to_value(value).map_err(|e| CliError::Io(e.to_string()))?;
        match &mut v {
            Value::Object(map) => {
                map.insert("schema_version".into(), SCHEMA_VERSION.into());
            }
            other => {
                let inner = std::mem::take(other);
                *other = serde_json::json!({ "schema_version": SCHEMA_VERSION, "data": inner });
            }
        }
        let mut text = serde_json::to_string_pretty(&v).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        write_file(&self.path(name), text.as_bytes())
    }

    pub fn csv(&self, name: &str) -> Result<Csv, CliError> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(Csv {
            inner: csv::Writer::from_writer(file),
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut f = File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(bytes)?;
    Ok(())
}

pub struct Csv {
    inner: csv::Writer<File>,
}

impl Csv {
    pub fn header(&mut self, cols: &[&str]) -> Result<(), CliError> {
        self.inner.write_record(cols)?;
        Ok(())
    }

    pub fn row(&mut self, cells: &[Cell]) -> Result<(), CliError> {
        self.inner.write_record(cells.iter().map(Cell::render))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), CliError> {
        self.inner.flush()?;
        Ok(())
    }
}

pub enum Cell {
    Int(u64),
    Float(f64),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            // Shortest representation that round-trips.
            Cell::Float(v) => format!("{v:?}"),
        }
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}
