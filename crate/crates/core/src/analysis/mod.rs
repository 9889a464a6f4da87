//! Statistics over attention and contribution rows.
//!
//! All accumulators are mergeable: partial results built on disjoint shards
//! of a dataset combine into the sequential result.

mod correlation;
mod histogram;
mod summary;

pub use correlation::{
    average_ranks, is_degenerate, pearson, spearman, Correlation, DEGENERATE_SPREAD,
};
pub use histogram::{center_of_mass, layer_center_of_mass, RelPosHistogram};
pub use summary::{
    head_correlation_summary, Averaging, CorrelationAccumulator, HeadCorrelationSummary,
};
