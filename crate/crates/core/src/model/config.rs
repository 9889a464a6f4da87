use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GeluKind;

/// Encoder hyper-parameters. Serialized as a flat JSON object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Embedding (hidden) size.
    pub d_e: usize,
    /// Per-head query/key size.
    pub d_q: usize,
    /// Per-head value size.
    pub d_v: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_position: usize,
    pub type_vocab_size: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default)]
    pub activation: GeluKind,
}

fn default_ln_eps() -> f64 {
    1e-12
}

impl EncoderConfig {
    /// BERT-base (uncased) dimensions.
    pub fn bert_base() -> Self {
        Self {
            n_layers: 12,
            n_heads: 12,
            d_e: 768,
            d_q: 64,
            d_v: 64,
            d_ff: 3072,
            vocab_size: 30522,
            max_position: 512,
            type_vocab_size: 2,
            ln_eps: 1e-12,
            activation: GeluKind::ExactGelu,
        }
    }

    /// Small encoder used by tests and demos.
    pub fn toy(n_layers: usize, n_heads: usize, d_e: usize, d_head: usize, d_ff: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_e,
            d_q: d_head,
            d_v: d_head,
            d_ff,
            vocab_size: 32,
            max_position: 16,
            type_vocab_size: 2,
            ln_eps: 1e-12,
            activation: GeluKind::ExactGelu,
        }
    }

    /// Width of the concatenated query/key projections.
    pub fn qk_width(&self) -> usize {
        self.n_heads * self.d_q
    }

    /// Width of the concatenated head outputs fed to the output projection.
    pub fn v_width(&self) -> usize {
        self.n_heads * self.d_v
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_q", self.d_q),
            ("d_v", self.d_v),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_position", self.max_position),
            ("type_vocab_size", self.type_vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Input(format!(
                    "config field {name} must be positive"
                )));
            }
        }
        if self.d_e < 2 {
            return Err(Error::Input(
                "config field d_e must be at least 2 for layer norm".into(),
            ));
        }
        if !(self.ln_eps >= 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::Input(format!(
                "ln_eps must be finite and non-negative, got {}",
                self.ln_eps
            )));
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
