//! Metrics CSV emission with a fixed column schema per run.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub struct MetricsWriter {
    path: PathBuf,
    columns: Vec<String>,
    file: std::io::BufWriter<std::fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path, columns: &[&str]) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "{}", columns.join(","))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            columns: columns.iter().map(|s| s.to_string()).collect(),
            file,
        })
    }

    pub fn write_row(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::invalid(format!(
                "{} values for {} columns in {:?}",
                values.len(),
                self.columns.len(),
                self.path
            )));
        }
        let row: Vec<String> = values.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(self.file, "{}", row.join(","))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}
