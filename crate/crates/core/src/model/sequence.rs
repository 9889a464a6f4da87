use serde::{Deserialize, Serialize};

use super::EncoderConfig;
use crate::error::{Error, Result};

/// A pre-tokenized input sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedSequence {
    pub id: String,
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    #[serde(default, rename = "tokens", skip_serializing_if = "Option::is_none")]
    pub display_tokens: Option<Vec<String>>,
}

impl TokenizedSequence {
    /// Single-segment sequence without display tokens.
    pub fn new(id: impl Into<String>, token_ids: Vec<usize>) -> Self {
        let n = token_ids.len();
        Self {
            id: id.into(),
            token_ids,
            segment_ids: vec![0; n],
            display_tokens: None,
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Checks internal consistency only (array lengths, segment values).
    pub fn check_shape(&self) -> Result<()> {
        if self.segment_ids.len() != self.token_ids.len() {
            return Err(Error::Input(format!(
                "sequence {:?}: {} token ids but {} segment ids",
                self.id,
                self.token_ids.len(),
                self.segment_ids.len()
            )));
        }
        if let Some(t) = &self.display_tokens {
            if t.len() != self.token_ids.len() {
                return Err(Error::Input(format!(
                    "sequence {:?}: {} token ids but {} display tokens",
                    self.id,
                    self.token_ids.len(),
                    t.len()
                )));
            }
        }
        Ok(())
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        self.check_shape()?;
        if self.is_empty() {
            return Err(Error::Input(format!("sequence {:?} is empty", self.id)));
        }
        if self.len() > config.max_position {
            return Err(Error::Input(format!(
                "sequence {:?} has {} tokens, more than max_position {}",
                self.id,
                self.len(),
                config.max_position
            )));
        }
        for (pos, &id) in self.token_ids.iter().enumerate() {
            if id >= config.vocab_size {
                return Err(Error::Input(format!(
                    "sequence {:?}: token id {id} at position {pos} is outside the vocabulary of {}",
                    self.id, config.vocab_size
                )));
            }
        }
        for (pos, &s) in self.segment_ids.iter().enumerate() {
            if s >= config.type_vocab_size {
                return Err(Error::Input(format!(
                    "sequence {:?}: segment id {s} at position {pos} is outside 0..{}",
                    self.id, config.type_vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Display label for position `i`, falling back to the token id.
    pub fn label(&self, i: usize) -> String {
        match &self.display_tokens {
            Some(t) => t[i].clone(),
            None => self.token_ids[i].to_string(),
        }
    }
}
