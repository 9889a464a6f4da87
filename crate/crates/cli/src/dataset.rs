//! JSON-Lines dataset ingestion.

use std::collections::HashSet;
use std::path::Path;

use anyhow::{bail, Context};
use attnscope_core::model::TokenizedSequence;
use serde::{Deserialize, Serialize};

/// Sequences kept after the length filter, with bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<TokenizedSequence>,
    /// Non-blank lines read.
    pub n_read: usize,
    /// Sequences dropped for exceeding the length limit.
    pub n_filtered: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub min: usize,
    pub median: f64,
    pub max: usize,
}

impl Dataset {
    /// Length statistics of the kept sequences, `None` when there are none.
    pub fn length_stats(&self) -> Option<LengthStats> {
        let mut lens: Vec<usize> = self.sequences.iter().map(TokenizedSequence::len).collect();
        lens.sort_unstable();
        let n = lens.len();
        if n == 0 {
            return None;
        }
        let median = if n % 2 == 1 {
            lens[n / 2] as f64
        } else {
            (lens[n / 2 - 1] + lens[n / 2]) as f64 / 2.0
        };
        Some(LengthStats {
            min: lens[0],
            median,
            max: lens[n - 1],
        })
    }
}

/// Ids become directory names, so they are restricted to a portable set.
fn check_id(id: &str, line: usize) -> anyhow::Result<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if !ok {
        bail!("line {line}: id {id:?} must be non-empty and use only ASCII letters, digits, '-', '_' or '.'");
    }
    Ok(())
}

/// Parses a JSON-Lines dataset and drops sequences longer than `max_len`.
pub fn load_sequences(path: &Path, max_len: usize) -> anyhow::Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading dataset {}", path.display()))?;
    parse_sequences(&text, max_len).with_context(|| format!("in dataset {}", path.display()))
}

pub fn parse_sequences(text: &str, max_len: usize) -> anyhow::Result<Dataset> {
    let mut sequences = Vec::new();
    let mut seen = HashSet::new();
    let mut n_read = 0;
    let mut n_filtered = 0;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        n_read += 1;
        let seq: TokenizedSequence = serde_json::from_str(line)
            .with_context(|| format!("line {line_no}: malformed sequence"))?;
        check_id(&seq.id, line_no)?;
        seq.check_shape()
            .with_context(|| format!("line {line_no}"))?;
        if seq.is_empty() {
            bail!("line {line_no}: sequence {:?} has no tokens", seq.id);
        }
        if !seen.insert(seq.id.clone()) {
            bail!("line {line_no}: duplicate sequence id {:?}", seq.id);
        }
        if seq.len() > max_len {
            n_filtered += 1;
            continue;
        }
        sequences.push(seq);
    }
    if n_read == 0 {
        log::warn!("dataset is empty");
    }
    if n_filtered > 0 {
        log::info!("skipped {n_filtered} sequences longer than {max_len} tokens");
    }
    Ok(Dataset {
        sequences,
        n_read,
        n_filtered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_gives_no_sequences() {
        let d = parse_sequences("", 64).unwrap();
        assert!(d.sequences.is_empty());
        assert_eq!(d.length_stats(), None);
    }

    #[test]
    fn one_line() {
        let d = parse_sequences(
            r#"{"id":"a","token_ids":[1,2,3,4,5,6],"segment_ids":[0,0,0,1,1,1]}"#,
            64,
        )
        .unwrap();
        assert_eq!(d.sequences.len(), 1);
        assert_eq!(d.sequences[0].len(), 6);
    }

    #[test]
    fn long_sequences_are_counted() {
        let ids: Vec<usize> = (0..65).collect();
        let line = serde_json::json!({"id": "long", "token_ids": ids, "segment_ids": vec![0; 65]});
        let short = r#"{"id":"s","token_ids":[1],"segment_ids":[0]}"#;
        let d = parse_sequences(&format!("{line}\n\n{short}\n"), 64).unwrap();
        assert_eq!((d.n_read, d.n_filtered, d.sequences.len()), (2, 1, 1));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"id\":\"a\",\"token_ids\":[1],\"segment_ids\":[0]}\n{not json}\n";
        let msg = format!("{:#}", parse_sequences(text, 64).unwrap_err());
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn length_mismatch_names_id() {
        let msg = format!(
            "{:#}",
            parse_sequences(r#"{"id":"odd","token_ids":[1,2],"segment_ids":[0]}"#, 64).unwrap_err()
        );
        assert!(msg.contains("odd"), "{msg}");
    }

    #[test]
    fn duplicate_and_unsafe_ids_rejected() {
        let a = r#"{"id":"a","token_ids":[1],"segment_ids":[0]}"#;
        assert!(parse_sequences(&format!("{a}\n{a}"), 64).is_err());
        assert!(parse_sequences(r#"{"id":"../x","token_ids":[1],"segment_ids":[0]}"#, 64).is_err());
    }

    #[test]
    fn median_of_even_count() {
        let text = (1..=4)
            .map(|n| serde_json::json!({"id": format!("s{n}"), "token_ids": vec![1; n], "segment_ids": vec![0; n]}).to_string())
            .collect::<Vec<_>>()
            .join("\n");
        let s = parse_sequences(&text, 64).unwrap().length_stats().unwrap();
        assert_eq!((s.min, s.median, s.max), (1, 2.5, 4));
    }
}
