//! On-disk layout of extraction output and its manifest.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use attnscope_core::archive::Archive;
use attnscope_core::attribution::InputAnchor;
use attnscope_core::model::EncoderConfig;
use attnscope_core::TensorF64;
use serde::{Deserialize, Serialize};

use crate::dataset::LengthStats;
use crate::kind::Kind;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_DIR: &str = "report";
/// Name of the single tensor stored in each matrix archive.
pub const VALUES: &str = "values";
/// Version of the CSV layouts written by the report commands.
pub const CSV_SCHEMA: u32 = 1;

const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractFlags {
    pub max_len: usize,
    pub kinds: Vec<Kind>,
    pub layers: Vec<usize>,
    pub heads: Vec<usize>,
    pub input_anchor: InputAnchor,
    pub allow_nonidentifiable: bool,
    pub jacobian_mode: String,
    pub precision: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_read: usize,
    pub n_filtered_long: usize,
    pub n_kept: usize,
    pub lengths: Option<LengthStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub id: String,
    pub len: usize,
    pub token_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
}

impl SequenceEntry {
    pub fn label(&self, i: usize) -> String {
        match &self.tokens {
            Some(t) => t[i].clone(),
            None => self.token_ids[i].to_string(),
        }
    }
}

/// Contribution rows whose target did not depend on any source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UndefinedRows {
    pub seq_id: String,
    pub kind: Kind,
    pub layer: usize,
    pub head: Option<usize>,
    pub rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractManifest {
    pub tool: String,
    pub version: String,
    pub csv_schema: u32,
    pub config_path: String,
    pub weights_path: String,
    pub data_path: String,
    pub model: EncoderConfig,
    pub flags: ExtractFlags,
    pub dataset: DatasetSummary,
    pub sequences: Vec<SequenceEntry>,
    pub undefined_rows: Vec<UndefinedRows>,
}

impl ExtractManifest {
    pub fn load(root: &Path) -> anyhow::Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            bail!(
                "no extraction manifest at {}; run `attnscope extract --out {}` first",
                path.display(),
                root.display()
            );
        }
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn sequence(&self, id: &str) -> anyhow::Result<&SequenceEntry> {
        self.sequences.iter().find(|s| s.id == id).ok_or_else(|| {
            let ids: Vec<&str> = self.sequences.iter().map(|s| s.id.as_str()).collect();
            anyhow::anyhow!("unknown sequence id {id:?}; available: {}", ids.join(", "))
        })
    }

    pub fn require_kind(&self, kind: Kind) -> anyhow::Result<()> {
        if !self.flags.kinds.contains(&kind) {
            bail!(
                "kind {kind} was not extracted (have: {}); rerun `attnscope extract` with --kind including {kind}",
                self.flags.kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")
            );
        }
        Ok(())
    }
}

/// Archive path of one matrix. Hidden contributions have no head.
pub fn matrix_path(
    root: &Path,
    seq_id: &str,
    kind: Kind,
    layer: usize,
    head: Option<usize>,
) -> PathBuf {
    let file = match head {
        Some(h) => format!("{kind}_l{layer}_h{h}.hta"),
        None => format!("{kind}_l{layer}.hta"),
    };
    root.join(seq_id).join(file)
}

/// The `(layer, head)` units a kind is stored under.
pub fn units(kind: Kind, layers: &[usize], heads: &[usize]) -> Vec<(usize, Option<usize>)> {
    layers
        .iter()
        .flat_map(|&l| -> Vec<(usize, Option<usize>)> {
            if kind.per_head() {
                heads.iter().map(|&h| (l, Some(h))).collect()
            } else {
                vec![(l, None)]
            }
        })
        .collect()
}

/// Requested indices checked against what is available; empty means all.
pub fn resolve(requested: &[usize], available: &[usize], what: &str) -> anyhow::Result<Vec<usize>> {
    if requested.is_empty() {
        return Ok(available.to_vec());
    }
    let mut out = requested.to_vec();
    out.sort_unstable();
    out.dedup();
    if let Some(bad) = out.iter().find(|v| !available.contains(v)) {
        bail!(
            "{what} {bad} not available (have: {})",
            available
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        );
    }
    Ok(out)
}

/// A stored matrix; undefined contribution rows are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredMatrix {
    pub values: TensorF64,
}

impl StoredMatrix {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, j: usize) -> Option<&[f64]> {
        let r = self.values.row(j);
        (!r[0].is_nan()).then_some(r)
    }
}

/// Checks that every row is a probability vector, or NaN throughout for
/// undefined contribution rows.
pub fn validate_rows(values: &TensorF64, allow_undefined: bool) -> Result<(), String> {
    for j in 0..values.rows() {
        let row = values.row(j);
        if allow_undefined && row.iter().all(|v| v.is_nan()) {
            continue;
        }
        if let Some(v) = row.iter().find(|v| !(-1e-12..=1.0 + 1e-12).contains(*v)) {
            return Err(format!("row {j} has entry {v} outside [0, 1]"));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(format!("row {j} sums to {s}"));
        }
    }
    Ok(())
}

/// Loads and validates one matrix of a sequence of length `len`.
pub fn read_matrix(
    root: &Path,
    seq_id: &str,
    kind: Kind,
    layer: usize,
    head: Option<usize>,
    len: usize,
) -> anyhow::Result<StoredMatrix> {
    let path = matrix_path(root, seq_id, kind, layer, head);
    if !path.exists() {
        bail!(
            "missing {}; run `attnscope extract --kind {kind}` with layers and heads covering layer {layer}{}",
            path.display(),
            head.map(|h| format!(" head {h}")).unwrap_or_default()
        );
    }
    let archive = Archive::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let values = archive
        .get_shaped::<f64>(VALUES, &[len, len])
        .with_context(|| format!("reading {}", path.display()))?;
    validate_rows(&values, kind.is_contribution())
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    Ok(StoredMatrix { values })
}
