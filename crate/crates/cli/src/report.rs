//! Shared helpers for report files.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use crate::artifacts::REPORT_DIR;

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Empty field for missing values.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn report_dir(root: &Path) -> anyhow::Result<PathBuf> {
    let dir = root.join(REPORT_DIR);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes a CSV with the given header and pre-formatted records.
pub fn write_csv(path: &Path, header: &[&str], records: &[Vec<String>]) -> anyhow::Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in records {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Provenance block shared by every report manifest.
#[derive(Debug, Clone, Serialize)]
pub struct ToolInfo {
    pub tool: &'static str,
    pub version: &'static str,
    pub csv_schema: u32,
}

impl Default for ToolInfo {
    fn default() -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            csv_schema: crate::artifacts::CSV_SCHEMA,
        }
    }
}
