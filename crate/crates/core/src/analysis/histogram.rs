use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mass accumulated by offset from the attending token.
///
/// Offsets run over `-(max_len-1)..=max_len-1`. For a row of length `L`
/// produced by the token at position `p`, entry `k` lands at offset `k - p`
/// and adds one occurrence there. The occurrence-normalized value at `x` is
/// `weight[x] / count[x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelPosHistogram<T> {
    max_len: usize,
    weight: Vec<T>,
    count: Vec<u64>,
}

impl<T: Scalar> RelPosHistogram<T> {
    pub fn new(max_len: usize) -> Self {
        let bins = (2 * max_len).saturating_sub(1);
        Self {
            max_len,
            weight: vec![T::zero(); bins],
            count: vec![0; bins],
        }
    }

    /// Rebuilds a histogram from raw accumulators indexed from offset
    /// `-(max_len-1)`.
    pub fn from_parts(max_len: usize, weight: Vec<T>, count: Vec<u64>) -> Result<Self> {
        let bins = (2 * max_len).saturating_sub(1);
        if weight.len() != bins || count.len() != bins {
            return Err(Error::Dimension(format!(
                "histogram for max_len {max_len} needs {bins} bins, got {} weights and {} counts",
                weight.len(),
                count.len()
            )));
        }
        Ok(Self {
            max_len,
            weight,
            count,
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn offsets(&self) -> impl Iterator<Item = i64> {
        let m = self.max_len as i64;
        (1 - m)..m
    }

    fn index(&self, offset: i64) -> Option<usize> {
        let i = offset + self.max_len as i64 - 1;
        (i >= 0 && (i as usize) < self.weight.len()).then_some(i as usize)
    }

    pub fn weight(&self, offset: i64) -> T {
        self.index(offset).map_or(T::zero(), |i| self.weight[i])
    }

    pub fn count(&self, offset: i64) -> u64 {
        self.index(offset).map_or(0, |i| self.count[i])
    }

    pub fn weights(&self) -> &[T] {
        &self.weight
    }

    pub fn counts(&self) -> &[u64] {
        &self.count
    }

    /// Accumulates the row of the token at position `p`.
    pub fn add_row(&mut self, p: usize, row: &[T]) -> Result<()> {
        let len = row.len();
        if len == 0 || len > self.max_len {
            return Err(Error::Input(format!(
                "row length {len} outside 1..={}",
                self.max_len
            )));
        }
        if p >= len {
            return Err(Error::Input(format!(
                "attending position {p} out of range for length {len}"
            )));
        }
        // offset k - p maps to bin k - p + max_len - 1
        let base = self.max_len - 1 - p;
        for (k, &v) in row.iter().enumerate() {
            self.weight[base + k] += v;
            self.count[base + k] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.max_len != self.max_len {
            return Err(Error::Input(format!(
                "cannot merge histograms with max_len {} and {}",
                self.max_len, other.max_len
            )));
        }
        for (a, &b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, &b) in self.count.iter_mut().zip(&other.count) {
            *a += b;
        }
        Ok(())
    }

    pub fn total_weight(&self) -> T {
        self.weight.iter().copied().sum()
    }

    pub fn total_count(&self) -> u64 {
        self.count.iter().sum()
    }

    /// `weight / count` per bin, `None` where nothing was observed.
    pub fn normalized(&self) -> Vec<Option<T>> {
        self.weight
            .iter()
            .zip(&self.count)
            .map(|(&w, &c)| (c > 0).then(|| w / T::lit(c as f64)))
            .collect()
    }

    /// Normalized values scaled so the largest is exactly 1. All zeros when
    /// there is no mass.
    pub fn display(&self) -> Vec<Option<T>> {
        let norm = self.normalized();
        let max = norm.iter().flatten().fold(T::zero(), |m, &v| m.max(v));
        norm.into_iter()
            .map(|v| v.map(|v| if max > T::zero() { v / max } else { T::zero() }))
            .collect()
    }
}

/// Mean offset of the occurrence-normalized histogram, `None` when it holds
/// no mass.
pub fn center_of_mass<T: Scalar>(h: &RelPosHistogram<T>) -> Option<T> {
    let mut num = T::zero();
    let mut den = T::zero();
    for (x, v) in h.offsets().zip(h.normalized()) {
        if let Some(v) = v {
            num += T::lit(x as f64) * v;
            den += v;
        }
    }
    (den != T::zero()).then(|| num / den)
}

/// Per-layer center of mass: mean of the heads' values.
pub fn layer_center_of_mass<T: Scalar>(per_head: &[T]) -> Option<T> {
    if per_head.is_empty() {
        return None;
    }
    Some(per_head.iter().copied().sum::<T>() / T::from_usize_lossy(per_head.len()))
}
