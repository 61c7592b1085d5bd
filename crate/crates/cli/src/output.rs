use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

/// Output directory. Every file is written to a temporary name and renamed,
/// so readers never see a partial file.
pub struct OutDir {
    root: PathBuf,
    /// Compact JSON of the effective configuration, embedded in each CSV.
    config_line: String,
}

impl OutDir {
    pub fn create(root: &Path, config: &impl Serialize) -> std::io::Result<Self> {
        fs::create_dir_all(root)?;
        let config_line = serde_json::to_string(config).map_err(std::io::Error::other)?;
        Ok(Self { root: root.to_path_buf(), config_line })
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        let target = self.root.join(name);
        let tmp = self.root.join(format!(".{name}.tmp"));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &target)
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> std::io::Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    /// CSV preceded by a `# config=` comment line.
    pub fn write_csv(&self, name: &str, table: &Table) -> std::io::Result<()> {
        let mut buf = format!("# config={}\n", self.config_line).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(&table.header)?;
            for r in &table.rows {
                w.write_record(r)?;
            }
            w.flush()?;
        }
        self.write(name, &buf)
    }
}

pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

/// Shortest round-trip representation; empty for missing values.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}
