use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::kind::Kind;

#[derive(Debug, Parser)]
#[command(
    name = "attnscope",
    version,
    about = "Attention and token attribution analysis for BERT-style encoders"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the encoder over a dataset and write per-sequence matrices.
    Extract(ExtractArgs),
    /// Relative-position histograms of extracted matrices.
    Histogram(HistogramArgs),
    /// Per-layer centers of mass of the relative-position histograms.
    Com(ComArgs),
    /// Per-head correlation between attention and a contribution kind.
    Correlate(CorrelateArgs),
    /// Paired attention and input-contribution heatmaps for one head.
    Maps(MapsArgs),
}

/// Layer and head selection. Layers are 1-based, heads 0-based.
#[derive(Debug, Clone, Default, Args)]
pub struct Selection {
    /// Comma-separated layers (default: all).
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    /// Comma-separated heads (default: all).
    #[arg(long, value_delimiter = ',')]
    pub heads: Vec<usize>,
    /// Worker threads; 0 uses one per core.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ExtractArgs {
    /// Model configuration JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Weight archive.
    #[arg(long)]
    pub weights: PathBuf,
    /// JSON-Lines dataset of tokenized sequences.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Sequences longer than this are skipped.
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    /// Matrices to extract.
    #[arg(long, value_delimiter = ',', default_value = "attention")]
    pub kind: Vec<Kind>,
    /// Anchor input contributions at the embedding layer-norm output.
    #[arg(long)]
    pub e0_post_norm: bool,
    /// Permit --max-len above the per-head value width.
    #[arg(long)]
    pub allow_nonidentifiable: bool,
    #[command(flatten)]
    pub selection: Selection,
}

/// Options shared by the commands that read extracted matrices.
#[derive(Debug, Clone, Args)]
pub struct AnalysisArgs {
    /// Directory written by `extract`; reports go to its `report/` subdirectory.
    #[arg(long)]
    pub out: PathBuf,
    /// Skip rows whose attending token is a special token.
    #[arg(long)]
    pub exclude_special: bool,
    /// Token ids treated as special by --exclude-special.
    #[arg(long, value_delimiter = ',', default_value = "101,102")]
    pub special_ids: Vec<usize>,
    #[command(flatten)]
    pub selection: Selection,
}

#[derive(Debug, Clone, Args)]
pub struct HistogramArgs {
    #[arg(long, default_value = "attention")]
    pub kind: Kind,
    #[command(flatten)]
    pub common: AnalysisArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ComArgs {
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "attention,input-contribution"
    )]
    pub kind: Vec<Kind>,
    #[command(flatten)]
    pub common: AnalysisArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CorrelateArgs {
    /// Contribution kind paired with attention.
    #[arg(long, default_value = "prev-contribution")]
    pub kind: Kind,
    /// Average within each sequence before averaging over sequences.
    #[arg(long)]
    pub per_sequence_mean: bool,
    #[command(flatten)]
    pub common: AnalysisArgs,
}

#[derive(Debug, Clone, Args)]
pub struct MapsArgs {
    /// Directory written by `extract`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seq_id: String,
    /// 1-based layer.
    #[arg(long)]
    pub layer: usize,
    /// 0-based head.
    #[arg(long)]
    pub head: usize,
    /// Use one color scale for both maps.
    #[arg(long)]
    pub shared_scale: bool,
}
