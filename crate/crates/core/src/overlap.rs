//! Token-level longest-common-substring statistics for novelty and
//! diversity checks.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::examples::ActivatingExample;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OverlapError {
    #[error("example has no activating tokens")]
    NoMarker,
    #[error("no pairs to compare")]
    NoPairs,
}

/// Length of the longest contiguous run of tokens shared by `a` and `b`.
///
/// Rolling-row dynamic program, `O(|a| |b|)` time and `O(|b|)` memory.
pub fn lcs_tokens<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    let mut best = 0;
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { 0 };
            best = best.max(cur[j + 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    best
}

/// Longest common substring between `b` and the part of the example that
/// ends at or before its last activating token. Text after the activation
/// cannot influence it, so it is excluded.
pub fn lcs_ending_on_activation(a: &ActivatingExample, b: &[u32]) -> Result<usize, OverlapError> {
    let last = a.last_marker().ok_or(OverlapError::NoMarker)?;
    Ok(lcs_prefix(&a.tokens, last, b))
}

/// [`lcs_tokens`] restricted to substrings of `a` ending at index `<= last`.
pub fn lcs_prefix(a: &[u32], last: usize, b: &[u32]) -> usize {
    lcs_tokens(&a[..(last + 1).min(a.len())], b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonKind {
    ActivatingActivating,
    GeneratedActivating,
    GeneratedGenerated,
}

impl fmt::Display for ComparisonKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ComparisonKind::ActivatingActivating => "activating-activating",
            ComparisonKind::GeneratedActivating => "generated-activating",
            ComparisonKind::GeneratedGenerated => "generated-generated",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    pub comparison_kind: ComparisonKind,
    pub pair_count: usize,
    /// `N -> fraction of pairs with overlap >= N tokens`, for `N = 1..=max_n`.
    pub ccdf: BTreeMap<usize, f64>,
}

/// CCDF of precomputed overlap lengths.
pub fn ccdf_from_lengths(
    lengths: &[usize],
    kind: ComparisonKind,
    max_n: usize,
) -> Result<OverlapStats, OverlapError> {
    if lengths.is_empty() {
        return Err(OverlapError::NoPairs);
    }
    let total = lengths.len() as f64;
    let ccdf = (1..=max_n)
        .map(|n| (n, lengths.iter().filter(|&&l| l >= n).count() as f64 / total))
        .collect();
    Ok(OverlapStats {
        comparison_kind: kind,
        pair_count: lengths.len(),
        ccdf,
    })
}

pub fn overlap_ccdf(
    pairs: &[(Vec<u32>, Vec<u32>)],
    kind: ComparisonKind,
    max_n: usize,
) -> Result<OverlapStats, OverlapError> {
    let lengths: Vec<usize> = pairs.iter().map(|(a, b)| lcs_tokens(a, b)).collect();
    ccdf_from_lengths(&lengths, kind, max_n)
}

/// Overlap lengths for the three comparison kinds within one feature.
/// Comparisons against activating examples use the ending-on-activation
/// constraint; generated-generated pairs use plain LCS.
pub fn feature_overlap_lengths(
    examples: &[&ActivatingExample],
    generated: &[Vec<u32>],
) -> BTreeMap<ComparisonKind, Vec<usize>> {
    let mut out: BTreeMap<ComparisonKind, Vec<usize>> = BTreeMap::new();
    for (i, a) in examples.iter().enumerate() {
        for b in &examples[i + 1..] {
            // Both sides are examples; constrain the first and compare with
            // the second's activating prefix.
            let len = match (a.last_marker(), b.last_marker()) {
                (Some(la), Some(lb)) => lcs_tokens(&a.tokens[..=la], &b.tokens[..=lb]),
                _ => lcs_tokens(&a.tokens, &b.tokens),
            };
            out.entry(ComparisonKind::ActivatingActivating).or_default().push(len);
        }
    }
    for g in generated {
        for a in examples {
            let len = lcs_ending_on_activation(a, g).unwrap_or_else(|_| lcs_tokens(&a.tokens, g));
            out.entry(ComparisonKind::GeneratedActivating).or_default().push(len);
        }
    }
    for (i, g) in generated.iter().enumerate() {
        for h in &generated[i + 1..] {
            out.entry(ComparisonKind::GeneratedGenerated).or_default().push(lcs_tokens(g, h));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::examples::ExampleSource;

    fn example(tokens: Vec<u32>, spans: Vec<(usize, usize)>) -> ActivatingExample {
        ActivatingExample {
            texts: tokens.iter().map(|t| t.to_string()).collect(),
            tokens,
            marker_spans: spans,
            peak_activation: 1.0,
            peak_index: 0,
            source: ExampleSource {
                sequence_index: 0,
                sequence_ref: "x@0".into(),
                token_index: 0,
            },
        }
    }

    #[test]
    fn lcs_basic_cases() {
        let a: Vec<u32> = (0..7).collect();
        assert_eq!(lcs_tokens(&a, &a), 7);
        assert_eq!(lcs_tokens(&[1, 2, 3], &[4, 5]), 0);
        assert_eq!(lcs_tokens(&[1, 2, 3, 4], &[9, 2, 3, 8]), 2);
        assert_eq!(lcs_tokens::<u32>(&[], &[1]), 0);
    }

    #[test]
    fn ending_on_activation_limits_prefix() {
        let ex = example(vec![5, 6, 7, 8], vec![(0, 1)]);
        assert!(lcs_ending_on_activation(&ex, &[5, 6, 7, 8]).unwrap() <= 1);
        let ex = example(vec![5, 6, 7, 8, 9], vec![(2, 3)]);
        assert_eq!(lcs_ending_on_activation(&ex, &[1, 5, 6, 7]).unwrap(), 3);
        assert_eq!(lcs_ending_on_activation(&ex, &[7, 8, 9]).unwrap(), 1);
        let ex = example(vec![5, 6], vec![]);
        assert_eq!(lcs_ending_on_activation(&ex, &[5]), Err(OverlapError::NoMarker));
    }

    #[test]
    fn ccdf_of_identical_pairs() {
        let pairs: Vec<_> = (0..4).map(|_| (vec![1, 2, 3, 4, 5], vec![1, 2, 3, 4, 5])).collect();
        let s = overlap_ccdf(&pairs, ComparisonKind::GeneratedGenerated, 10).unwrap();
        for n in 1..=10 {
            assert_eq!(s.ccdf[&n], if n <= 5 { 1.0 } else { 0.0 });
        }
        assert_eq!(s.pair_count, 4);
        assert_eq!(
            overlap_ccdf(&[], ComparisonKind::GeneratedGenerated, 10),
            Err(OverlapError::NoPairs)
        );
    }

    #[test]
    fn feature_pair_counts() {
        let ex: Vec<ActivatingExample> = (0..3).map(|i| example(vec![i, i + 1, 9], vec![(2, 3)])).collect();
        let refs: Vec<&ActivatingExample> = ex.iter().collect();
        let gen = vec![vec![1, 2, 9], vec![3, 9], vec![7]];
        let out = feature_overlap_lengths(&refs, &gen);
        assert_eq!(out[&ComparisonKind::ActivatingActivating].len(), 3);
        assert_eq!(out[&ComparisonKind::GeneratedActivating].len(), 9);
        assert_eq!(out[&ComparisonKind::GeneratedGenerated].len(), 3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn lcs_is_symmetric_and_bounded(
                a in proptest::collection::vec(0u32..4, 0..24),
                b in proptest::collection::vec(0u32..4, 0..24),
            ) {
                let n = lcs_tokens(&a, &b);
                prop_assert_eq!(n, lcs_tokens(&b, &a));
                prop_assert!(n <= a.len().min(b.len()));
                prop_assert_eq!(lcs_tokens(&a, &a), a.len());
            }

            #[test]
            fn prefix_never_exceeds_full(
                a in proptest::collection::vec(0u32..4, 1..24),
                b in proptest::collection::vec(0u32..4, 0..24),
                last in 0usize..24,
            ) {
                let p = lcs_prefix(&a, last, &b);
                prop_assert!(p <= lcs_tokens(&a, &b));
                prop_assert!(p <= last + 1);
            }
        }
    }
}
