use serde::{Deserialize, Serialize};

use super::correlation::{pearson, spearman, Correlation};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How per-token correlations are averaged into one value per head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// Mean over every attending token of every sequence.
    #[default]
    PerToken,
    /// Mean within each sequence first, then over sequences.
    PerSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadCorrelationSummary<T> {
    pub layer: usize,
    pub head: usize,
    /// `None` when every pair was skipped.
    pub mean_pearson: Option<T>,
    pub mean_spearman: Option<T>,
    pub n_pairs: usize,
    pub n_skipped: usize,
}

/// Mergeable accumulator behind [`HeadCorrelationSummary`].
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationAccumulator<T> {
    layer: usize,
    head: usize,
    averaging: Averaging,
    sum_pearson: T,
    sum_spearman: T,
    /// Number of terms in the sums: pairs, or sequences with at least one pair.
    n_terms: usize,
    n_pairs: usize,
    n_skipped: usize,
}

impl<T: Scalar> CorrelationAccumulator<T> {
    pub fn new(layer: usize, head: usize, averaging: Averaging) -> Self {
        Self {
            layer,
            head,
            averaging,
            sum_pearson: T::zero(),
            sum_spearman: T::zero(),
            n_terms: 0,
            n_pairs: 0,
            n_skipped: 0,
        }
    }

    /// Pearson and Spearman of one pair, or `None` if it must be skipped.
    fn score(attention: &[T], contribution: Option<&[T]>) -> Result<Option<(T, T)>> {
        let Some(c) = contribution else {
            return Ok(None);
        };
        if attention.len() < 2 {
            return Ok(None);
        }
        match (pearson(attention, c)?, spearman(attention, c)?) {
            (Correlation::Value(p), Correlation::Value(s)) => Ok(Some((p, s))),
            _ => Ok(None),
        }
    }

    /// Adds all attending tokens of one sequence. A `None` contribution
    /// marks an undefined row and is skipped like a degenerate pair.
    pub fn push_sequence<'a, I>(&mut self, pairs: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a [T], Option<&'a [T]>)>,
    {
        let (mut sp, mut ss, mut n) = (T::zero(), T::zero(), 0usize);
        for (a, c) in pairs {
            if let Some(c) = c {
                if a.len() != c.len() {
                    return Err(Error::Input(format!(
                        "attention row of length {} paired with contribution row of length {}",
                        a.len(),
                        c.len()
                    )));
                }
            }
            match Self::score(a, c)? {
                Some((p, s)) => {
                    match self.averaging {
                        Averaging::PerToken => {
                            self.sum_pearson += p;
                            self.sum_spearman += s;
                            self.n_terms += 1;
                        }
                        Averaging::PerSequence => {
                            sp += p;
                            ss += s;
                        }
                    }
                    n += 1;
                    self.n_pairs += 1;
                }
                None => self.n_skipped += 1,
            }
        }
        if self.averaging == Averaging::PerSequence && n > 0 {
            let nf = T::from_usize_lossy(n);
            self.sum_pearson += sp / nf;
            self.sum_spearman += ss / nf;
            self.n_terms += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if (self.layer, self.head, self.averaging) != (other.layer, other.head, other.averaging) {
            return Err(Error::Input(format!(
                "cannot merge correlation accumulators for (l{}, h{}) and (l{}, h{})",
                self.layer, self.head, other.layer, other.head
            )));
        }
        self.sum_pearson += other.sum_pearson;
        self.sum_spearman += other.sum_spearman;
        self.n_terms += other.n_terms;
        self.n_pairs += other.n_pairs;
        self.n_skipped += other.n_skipped;
        Ok(())
    }

    pub fn finish(&self) -> Result<HeadCorrelationSummary<T>> {
        if self.n_pairs + self.n_skipped == 0 {
            return Err(Error::Input(format!(
                "no attention/contribution pairs for layer {} head {}",
                self.layer, self.head
            )));
        }
        let mean = |s: T| (self.n_terms > 0).then(|| s / T::from_usize_lossy(self.n_terms));
        Ok(HeadCorrelationSummary {
            layer: self.layer,
            head: self.head,
            mean_pearson: mean(self.sum_pearson),
            mean_spearman: mean(self.sum_spearman),
            n_pairs: self.n_pairs,
            n_skipped: self.n_skipped,
        })
    }
}

/// Per-token mean correlation between paired attention and contribution rows.
pub fn head_correlation_summary<'a, T, I>(
    pairs: I,
    layer: usize,
    head: usize,
) -> Result<HeadCorrelationSummary<T>>
where
    T: Scalar,
    I: IntoIterator<Item = (&'a [T], &'a [T])>,
{
    let mut acc = CorrelationAccumulator::new(layer, head, Averaging::PerToken);
    acc.push_sequence(pairs.into_iter().map(|(a, c)| (a, Some(c))))?;
    acc.finish()
}
