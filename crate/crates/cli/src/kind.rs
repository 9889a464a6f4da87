use std::fmt;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

/// A per-sequence matrix the extractor can produce.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, ValueEnum, Serialize, Deserialize,
)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    /// Attention probabilities of each head.
    Attention,
    /// Contribution of the layer input to each head output.
    PrevContribution,
    /// Contribution of the model input to each head output.
    InputContribution,
    /// Contribution of the model input to each layer output.
    HiddenContribution,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Attention => "attention",
            Kind::PrevContribution => "prev-contribution",
            Kind::InputContribution => "input-contribution",
            Kind::HiddenContribution => "hidden-contribution",
        }
    }

    /// Whether there is one matrix per head rather than one per layer.
    pub fn per_head(self) -> bool {
        self != Kind::HiddenContribution
    }

    pub fn is_contribution(self) -> bool {
        self != Kind::Attention
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
