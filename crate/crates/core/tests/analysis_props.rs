//! Correlation, histogram and summary properties against brute-force oracles.

mod common;

use attnscope_core::analysis::{
    center_of_mass, pearson, spearman, Averaging, Correlation, CorrelationAccumulator,
    RelPosHistogram,
};
use common::rng;
use proptest::prelude::*;
use rand::Rng;

/// Textbook single-pass Pearson.
fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Average ranks by counting: 1 + (#smaller) + (#equal - 1) / 2.
fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let eq = x.iter().filter(|&&u| u == v).count() as f64;
            1.0 + less + (eq - 1.0) / 2.0
        })
        .collect()
}

fn random_pair(r: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let n = r.random_range(3..30);
    let mut x: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
    let mut y: Vec<f64> = x
        .iter()
        .map(|v| v * r.random_range(-1.0..1.0) + r.random_range(-2.0..2.0))
        .collect();
    // Inject ties in roughly a third of the pairs.
    if r.random_bool(0.33) {
        for i in 1..n {
            if r.random_bool(0.3) {
                x[i] = x[i - 1];
            }
            if r.random_bool(0.3) {
                y[i] = y[r.random_range(0..i)];
            }
        }
    }
    (x, y)
}

#[test]
fn correlations_match_brute_force() {
    let mut r = rng(7);
    let mut checked = 0;
    for _ in 0..1000 {
        let (x, y) = random_pair(&mut r);
        if let Correlation::Value(p) = pearson(&x, &y).unwrap() {
            assert!((p - naive_pearson(&x, &y)).abs() < 1e-12);
            checked += 1;
        }
        if let Correlation::Value(s) = spearman(&x, &y).unwrap() {
            let want = naive_pearson(&brute_ranks(&x), &brute_ranks(&y));
            assert!((s - want).abs() < 1e-12, "{s} vs {want}");
        }
    }
    assert!(checked > 950);
}

#[test]
fn spearman_without_ties_matches_rank_difference_formula() {
    let mut r = rng(8);
    for _ in 0..200 {
        let n = r.random_range(3..20);
        let x: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let y: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let (rx, ry) = (brute_ranks(&x), brute_ranks(&y));
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
        let nf = n as f64;
        let want = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
        let got = spearman(&x, &y).unwrap().value().unwrap();
        assert!((got - want).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn correlations_are_bounded(xs in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 2..40)) {
        let (x, y): (Vec<f64>, Vec<f64>) = xs.into_iter().unzip();
        for c in [pearson(&x, &y).unwrap(), spearman(&x, &y).unwrap()] {
            if let Some(v) = c.value() {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn pearson_is_affine_invariant(
        xs in proptest::collection::vec((-10f64..10.0, -10f64..10.0), 3..30),
        a in 0.1f64..10.0,
        b in -10f64..10.0,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = xs.into_iter().unzip();
        let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        if let (Some(p), Some(q)) = (pearson(&x, &y).unwrap().value(), pearson(&ax, &y).unwrap().value()) {
            prop_assert!((p - q).abs() < 1e-9);
        }
        let neg: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
        if let (Some(p), Some(q)) = (pearson(&x, &y).unwrap().value(), pearson(&neg, &y).unwrap().value()) {
            prop_assert!((p + q).abs() < 1e-9);
        }
    }

    #[test]
    fn spearman_is_monotone_invariant(xs in proptest::collection::vec((-3f64..3.0, -3f64..3.0), 3..30)) {
        let (x, y): (Vec<f64>, Vec<f64>) = xs.into_iter().unzip();
        let mx: Vec<f64> = x.iter().map(|v| v.exp() + v.powi(3)).collect();
        prop_assert_eq!(spearman(&x, &y).unwrap(), spearman(&mx, &y).unwrap());
    }
}

#[test]
fn constant_input_is_degenerate() {
    let x = [0.25; 4];
    let y = [0.1, 0.2, 0.3, 0.4];
    assert_eq!(pearson(&x, &y).unwrap(), Correlation::Degenerate);
    assert_eq!(spearman(&y, &x).unwrap(), Correlation::Degenerate);
}

/// Random stochastic rows: one per attending position per sequence.
fn random_dataset(seed: u64, n_seq: usize, max_len: usize) -> Vec<Vec<Vec<f64>>> {
    let mut r = rng(seed);
    (0..n_seq)
        .map(|_| {
            let n = r.random_range(1..=max_len);
            (0..n)
                .map(|_| {
                    let row: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
                    let s: f64 = row.iter().sum();
                    row.into_iter().map(|v| v / s).collect()
                })
                .collect()
        })
        .collect()
}

fn histogram_of(data: &[Vec<Vec<f64>>], max_len: usize) -> RelPosHistogram<f64> {
    let mut h = RelPosHistogram::new(max_len);
    for seq in data {
        for (p, row) in seq.iter().enumerate() {
            h.add_row(p, row).unwrap();
        }
    }
    h
}

#[test]
fn histogram_conserves_mass_and_counts_occurrences() {
    let max_len = 9;
    let data = random_dataset(9, 40, max_len);
    let h = histogram_of(&data, max_len);
    let rows: usize = data.iter().map(Vec::len).sum();
    assert!((h.total_weight() - rows as f64).abs() < 1e-10);
    for x in h.offsets() {
        let want: usize = data
            .iter()
            .map(|s| s.len().saturating_sub(x.unsigned_abs() as usize))
            .sum();
        assert_eq!(h.count(x), want as u64, "offset {x}");
    }
    let squares: usize = data.iter().map(|s| s.len() * s.len()).sum();
    assert_eq!(h.total_count(), squares as u64);
}

#[test]
fn center_of_mass_translates_with_bins() {
    let max_len = 6;
    let h = histogram_of(&random_dataset(10, 20, max_len), max_len);
    let base = center_of_mass(&h).unwrap();
    // Shift every bin one offset to the right; the last bin falls off, so
    // clear it first.
    let n = h.weights().len();
    let mut w = vec![0.0; n];
    let mut c = vec![0u64; n];
    w[1..].copy_from_slice(&h.weights()[..n - 1]);
    c[1..].copy_from_slice(&h.counts()[..n - 1]);
    let mut trimmed_w = h.weights().to_vec();
    let mut trimmed_c = h.counts().to_vec();
    trimmed_w[n - 1] = 0.0;
    trimmed_c[n - 1] = 0;
    let trimmed = RelPosHistogram::from_parts(max_len, trimmed_w, trimmed_c).unwrap();
    let shifted = RelPosHistogram::from_parts(max_len, w, c).unwrap();
    let d = center_of_mass(&shifted).unwrap() - center_of_mass(&trimmed).unwrap();
    assert!((d - 1.0).abs() < 1e-12);
    assert!(base.is_finite());
}

#[test]
fn sharded_accumulation_matches_single_pass() {
    let max_len = 8;
    let data = random_dataset(11, 60, max_len);
    let contrib: Vec<Vec<Vec<f64>>> = data
        .iter()
        .map(|s| {
            s.iter()
                .map(|row| row.iter().map(|v| v * v + 0.01).collect())
                .collect()
        })
        .collect();
    let whole = histogram_of(&data, max_len);
    let push = |acc: &mut CorrelationAccumulator<f64>, i: usize| {
        acc.push_sequence(
            data[i]
                .iter()
                .zip(&contrib[i])
                .map(|(a, c)| (a.as_slice(), Some(c.as_slice()))),
        )
        .unwrap()
    };
    for averaging in [Averaging::PerToken, Averaging::PerSequence] {
        let mut single = CorrelationAccumulator::new(1, 0, averaging);
        for i in 0..data.len() {
            push(&mut single, i);
        }
        let want = single.finish().unwrap();
        for shards in [2usize, 3, 7] {
            let chunk = data.len().div_ceil(shards);
            let mut hist = RelPosHistogram::new(max_len);
            let mut acc = CorrelationAccumulator::new(1, 0, averaging);
            for start in (0..data.len()).step_by(chunk) {
                let end = (start + chunk).min(data.len());
                hist.merge(&histogram_of(&data[start..end], max_len))
                    .unwrap();
                let mut part = CorrelationAccumulator::new(1, 0, averaging);
                for i in start..end {
                    push(&mut part, i);
                }
                acc.merge(&part).unwrap();
            }
            assert_eq!(hist.counts(), whole.counts());
            for (a, b) in hist.weights().iter().zip(whole.weights()) {
                assert!((a - b).abs() < 1e-12);
            }
            let got = acc.finish().unwrap();
            assert_eq!((got.n_pairs, got.n_skipped), (want.n_pairs, want.n_skipped));
            assert!((got.mean_pearson.unwrap() - want.mean_pearson.unwrap()).abs() < 1e-12);
            assert!((got.mean_spearman.unwrap() - want.mean_spearman.unwrap()).abs() < 1e-12);
        }
    }
}

#[test]
fn undefined_rows_are_skipped() {
    let a = [0.5, 0.5];
    let b = [0.2, 0.8];
    let mut acc = CorrelationAccumulator::<f64>::new(1, 0, Averaging::PerToken);
    acc.push_sequence([(&a[..], None), (&b[..], Some(&a[..]))])
        .unwrap();
    let s = acc.finish().unwrap();
    assert_eq!(s.n_skipped, 2);
    assert_eq!(s.mean_pearson, None);
}
