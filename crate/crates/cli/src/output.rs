//! CSV and JSON artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};

/// A directory that collects the files written by one experiment.
pub struct ArtifactDir {
    root: PathBuf,
    written: Vec<String>,
}

impl ArtifactDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|source| CliError::Io {
            context: format!("creating {}", root.display()),
            source,
        })?;
        Ok(ArtifactDir { root: root.to_path_buf(), written: Vec::new() })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    /// File names written so far, in order.
    pub fn written(&self) -> &[String] {
        &self.written
    }

    /// Writes a header row followed by numeric records.
    pub fn csv<I, R>(&mut self, file: &str, header: &[String], rows: I) -> CliResult<()>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = Field>,
    {
        let mut w = csv::Writer::from_path(self.root.join(file))?;
        w.write_record(header)?;
        for row in rows {
            let rec: Vec<String> = row.into_iter().map(|f| f.to_string()).collect();
            w.write_record(&rec)?;
        }
        w.flush().map_err(|source| CliError::Io { context: format!("writing {file}"), source })?;
        self.written.push(file.to_string());
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, file: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.root.join(file), text).map_err(|source| CliError::Io {
            context: format!("writing {file}"),
            source,
        })?;
        self.written.push(file.to_string());
        Ok(())
    }
}

/// One CSV cell.
#[derive(Debug, Clone)]
pub enum Field {
    Num(f64),
    Int(usize),
    Text(String),
}

impl std::fmt::Display for Field {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            // shortest representation that round-trips
            Field::Num(v) => write!(f, "{v:?}"),
            Field::Int(v) => write!(f, "{v}"),
            Field::Text(s) => f.write_str(s),
        }
    }
}

impl From<f64> for Field {
    fn from(v: f64) -> Self {
        Field::Num(v)
    }
}

impl From<usize> for Field {
    fn from(v: usize) -> Self {
        Field::Int(v)
    }
}

impl From<String> for Field {
    fn from(v: String) -> Self {
        Field::Text(v)
    }
}

impl From<&str> for Field {
    fn from(v: &str) -> Self {
        Field::Text(v.to_string())
    }
}

pub fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quotes_text() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = ArtifactDir::create(dir.path()).unwrap();
        out.csv("t.csv", &header(&["term", "value"]), vec![vec![Field::from("x1^2, x2"), Field::from(0.5)]])
            .unwrap();
        let text = fs::read_to_string(dir.path().join("t.csv")).unwrap();
        assert_eq!(text, "term,value\n\"x1^2, x2\",0.5\n");
    }
}
