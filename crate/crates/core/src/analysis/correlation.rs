use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Relative spread below which a vector counts as constant.
pub const DEGENERATE_SPREAD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Correlation<T> {
    Value(T),
    /// One of the inputs has (numerically) zero variance.
    Degenerate,
}

impl<T: Copy> Correlation<T> {
    pub fn value(self) -> Option<T> {
        match self {
            Correlation::Value(v) => Some(v),
            Correlation::Degenerate => None,
        }
    }
}

/// True when `max − min ≤ DEGENERATE_SPREAD · max(|max|, |min|)`.
pub fn is_degenerate<T: Scalar>(x: &[T]) -> bool {
    let (lo, hi) = x
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let scale = lo.abs().max(hi.abs());
    hi - lo <= T::lit(DEGENERATE_SPREAD) * scale
}

fn check_pair<T: Scalar>(x: &[T], y: &[T]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Input(format!(
            "correlation inputs differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Input(format!(
            "correlation needs at least 2 points, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Input("correlation inputs must be finite".into()));
    }
    Ok(())
}

fn centered_r<T: Scalar>(x: &[T], y: &[T]) -> T {
    let n = T::from_usize_lossy(x.len());
    let mx = x.iter().copied().sum::<T>() / n;
    let my = y.iter().copied().sum::<T>() / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    (sxy / (sxx * syy).sqrt()).max(-T::one()).min(T::one())
}

/// Sample Pearson correlation.
pub fn pearson<T: Scalar>(x: &[T], y: &[T]) -> Result<Correlation<T>> {
    check_pair(x, y)?;
    if is_degenerate(x) || is_degenerate(y) {
        return Ok(Correlation::Degenerate);
    }
    Ok(Correlation::Value(centered_r(x, y)))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks<T: Scalar>(x: &[T]) -> Vec<T> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![T::zero(); x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        // Positions start..end hold ranks start+1..=end.
        let r = T::from_usize_lossy(start + 1 + end) / T::lit(2.0);
        for &i in &idx[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation: Pearson over average ranks.
pub fn spearman<T: Scalar>(x: &[T], y: &[T]) -> Result<Correlation<T>> {
    check_pair(x, y)?;
    if is_degenerate(x) || is_degenerate(y) {
        return Ok(Correlation::Degenerate);
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    Ok(Correlation::Value(centered_r(&rx, &ry)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(c: Correlation<f64>) -> f64 {
        c.value().expect("non-degenerate")
    }

    #[test]
    fn pearson_reference_values() {
        assert!((r(pearson(&[1., 2., 3.], &[2., 4., 6.]).unwrap()) - 1.0).abs() < 1e-15);
        assert!((r(pearson(&[1., 2., 3.], &[3., 2., 1.]).unwrap()) + 1.0).abs() < 1e-15);
        // Σdxdy = 4, Σdx² = Σdy² = 5.
        assert!((r(pearson(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap()) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn spearman_reference_values() {
        assert_eq!(
            r(spearman(&[0.1, 0.5, 0.9], &[10., 20., 30.]).unwrap()),
            1.0
        );
        assert!((r(spearman(&[1., 2., 3.], &[3., 2., 1.]).unwrap()) + 1.0).abs() < 1e-15);
        let v = r(spearman(&[1., 1., 2.], &[1., 2., 3.]).unwrap());
        assert!((v - 1.5 / 3f64.sqrt()).abs() < 1e-15);
        assert!((v - 0.866_025_403_784_438_6).abs() < 1e-15);
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(
            average_ranks(&[3.0, 1.0, 3.0, 2.0]),
            vec![3.5, 1.0, 3.5, 2.0]
        );
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(
            pearson(&[0.25; 4], &[1., 2., 3., 4.]).unwrap(),
            Correlation::Degenerate
        );
        assert_eq!(
            spearman(&[1., 2.], &[0.0, 0.0]).unwrap(),
            Correlation::Degenerate
        );
        assert_eq!(
            pearson(&[0.2, 0.2 + 1e-17], &[1., 2.]).unwrap(),
            Correlation::Degenerate
        );
    }

    #[test]
    fn input_errors() {
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }
}
