pub mod com;
pub mod correlate;
pub mod extract;
pub mod histogram;
pub mod maps;

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::Serialize;

use crate::args::AnalysisArgs;
use crate::artifacts::{resolve, ExtractManifest, SequenceEntry};

/// Extraction output plus the selection an analysis command works on.
pub struct Context {
    pub root: PathBuf,
    pub manifest: ExtractManifest,
    pub layers: Vec<usize>,
    pub heads: Vec<usize>,
    pub special: Option<BTreeSet<usize>>,
    pub special_ids: Vec<usize>,
    pub threads: usize,
}

/// Effective analysis flags, recorded in each report manifest.
#[derive(Debug, Clone, Serialize)]
pub struct AnalysisFlags {
    pub layers: Vec<usize>,
    pub heads: Vec<usize>,
    pub exclude_special: bool,
    pub special_ids: Vec<usize>,
    pub max_len: usize,
}

impl Context {
    pub fn open(a: &AnalysisArgs) -> anyhow::Result<Self> {
        let manifest = ExtractManifest::load(&a.out)?;
        let layers = resolve(&a.selection.layers, &manifest.flags.layers, "layer")?;
        let heads = resolve(&a.selection.heads, &manifest.flags.heads, "head")?;
        let special = a
            .exclude_special
            .then(|| a.special_ids.iter().copied().collect());
        Ok(Self {
            root: a.out.clone(),
            manifest,
            layers,
            heads,
            special,
            special_ids: a.special_ids.clone(),
            threads: a.selection.threads,
        })
    }

    /// Whether the row of token `p` is analysed.
    pub fn keeps(&self, seq: &SequenceEntry, p: usize) -> bool {
        self.special
            .as_ref()
            .is_none_or(|s| !s.contains(&seq.token_ids[p]))
    }

    pub fn flags(&self) -> AnalysisFlags {
        AnalysisFlags {
            layers: self.layers.clone(),
            heads: self.heads.clone(),
            exclude_special: self.special.is_some(),
            special_ids: self.special_ids.clone(),
            max_len: self.manifest.flags.max_len,
        }
    }
}
