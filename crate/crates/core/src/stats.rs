//! Rank statistics.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("inputs have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 observations, got {0}")]
    TooFew(usize),
    #[error("correlation undefined for constant input")]
    Constant,
    #[error("input contains NaN")]
    NaN,
}

/// 1-based ranks with ties sharing the average of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::Constant);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation, average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(StatsError::TooFew(x.len()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(StatsError::NaN);
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn perfect_and_reversed() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [2.0, 4.0, 8.0, 16.0, 32.0];
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        let r: Vec<f64> = y.iter().rev().copied().collect();
        assert!((spearman(&x, &r).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert_eq!(spearman(&[1.0, 2.0], &[1.0, 2.0]), Err(StatsError::TooFew(2)));
        assert_eq!(spearman(&[1.0; 4], &[1.0, 2.0, 3.0, 4.0]), Err(StatsError::Constant));
        assert_eq!(
            spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0]),
            Err(StatsError::LengthMismatch(3, 2))
        );
        assert_eq!(spearman(&[1.0, f64::NAN, 3.0], &[1.0, 2.0, 3.0]), Err(StatsError::NaN));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn spearman_is_bounded_and_symmetric(
                pairs in proptest::collection::vec((0i32..6, -50i32..50), 3..30),
            ) {
                let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
                let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
                if let Ok(r) = spearman(&x, &y) {
                    prop_assert!((-1.0..=1.0).contains(&r));
                    prop_assert_eq!(Ok(r), spearman(&y, &x));
                }
            }

            #[test]
            fn ranks_sum_is_fixed(values in proptest::collection::vec(0i32..5, 1..40)) {
                let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
                let n = v.len() as f64;
                let sum: f64 = average_ranks(&v).iter().sum();
                prop_assert!((sum - n * (n + 1.0) / 2.0).abs() < 1e-9);
            }

            #[test]
            fn monotone_transform_gives_one(values in proptest::collection::hash_set(-1000i32..1000, 3..30)) {
                let x: Vec<f64> = values.iter().map(|&v| v as f64).collect();
                let y: Vec<f64> = x.iter().map(|v| v * v * v + 3.0).collect();
                prop_assert_eq!(spearman(&x, &y), Ok(1.0));
            }
        }
    }
}
