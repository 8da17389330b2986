//! SAE-level statistics and report tables.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::examples::FilterVerdict;
use crate::generation::PositionHistogram;
use crate::overlap::OverlapStats;
use crate::scoring::{BucketRate, SensitivityRecord, Unevaluated};
use crate::stats::spearman;

pub const REPORT_SCHEMA: &str = "sae_report/1";
pub const DEFAULT_FREQUENCY_BINS: usize = 20;
pub const SENSITIVITY_HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("frequency weighting needs at least 2 SAEs, got {0}")]
    TooFewSaes(usize),
    #[error("SAE {sae} has no features to weight")]
    EmptySae { sae: String },
    #[error("feature {feature} of SAE {sae} has non-positive frequency {frequency}")]
    NonPositiveFrequency { sae: String, feature: u32, frequency: f64 },
    #[error("degenerate frequency data: {0}")]
    Degenerate(String),
    #[error("failed to read {path}: {message}")]
    Input { path: String, message: String },
    #[error("failed to write {path}: {message}")]
    Output { path: String, message: String },
}

/// Log-spaced bins over a closed frequency range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBins {
    /// `n_bins + 1` edges in frequency units.
    pub edges: Vec<f64>,
    log_min: f64,
    log_max: f64,
}

impl FrequencyBins {
    pub fn log_spaced(min: f64, max: f64, n_bins: usize) -> Result<Self, AggregationError> {
        if n_bins == 0 || !(min > 0.0) || !(max > min) {
            return Err(AggregationError::Degenerate(format!(
                "cannot build {n_bins} log bins over [{min}, {max}]"
            )));
        }
        let (log_min, log_max) = (min.log10(), max.log10());
        let edges = (0..=n_bins)
            .map(|i| 10f64.powf(log_min + (log_max - log_min) * i as f64 / n_bins as f64))
            .collect();
        Ok(Self {
            edges,
            log_min,
            log_max,
        })
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bin index; values at or beyond the range ends fall in the end bins.
    pub fn bin_of(&self, frequency: f64) -> usize {
        let n = self.len();
        let pos = (frequency.log10() - self.log_min) / (self.log_max - self.log_min) * n as f64;
        if pos.is_nan() || pos < 0.0 {
            0
        } else {
            (pos.floor() as usize).min(n - 1)
        }
    }

    /// Fraction of `frequencies` in each bin.
    pub fn masses<'a>(&self, frequencies: impl IntoIterator<Item = &'a f64>) -> Vec<f64> {
        let mut counts = vec![0usize; self.len()];
        let mut total = 0usize;
        for &f in frequencies {
            counts[self.bin_of(f)] += 1;
            total += 1;
        }
        counts
            .into_iter()
            .map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeWeights {
    pub weights: BTreeMap<u32, f64>,
    /// Unweighted fraction of this SAE's features in each bin.
    pub bin_mass: Vec<f64>,
    /// Target mass in bins where this SAE has no features; cannot be matched.
    pub uncovered_target_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyWeighting {
    pub bins: FrequencyBins,
    /// Average of the per-SAE bin masses.
    pub target_distribution: Vec<f64>,
    pub per_sae: BTreeMap<String, SaeWeights>,
}

impl FrequencyWeighting {
    /// Weighted bin masses of one SAE: sum of weights per bin over the
    /// feature count.
    pub fn weighted_masses(&self, sae: &str, frequencies: &BTreeMap<u32, f64>) -> Vec<f64> {
        let mut masses = vec![0.0; self.bins.len()];
        let Some(w) = self.per_sae.get(sae) else {
            return masses;
        };
        for (feature, &f) in frequencies {
            masses[self.bins.bin_of(f)] += w.weights.get(feature).copied().unwrap_or(0.0);
        }
        let n = frequencies.len().max(1) as f64;
        masses.iter_mut().for_each(|m| *m /= n);
        masses
    }
}

/// Weights each feature so that every SAE's frequency histogram matches the
/// average histogram across SAEs.
///
/// A feature in bin `b` of SAE `s` gets `target(b) / mass_s(b)`. When an SAE
/// covers every bin with target mass these weights already average to 1 and
/// are renormalized to exactly that; otherwise the unmatched target mass is
/// reported and logged and the weights are left unnormalized, so covered
/// bins still carry their target mass.
pub fn build_frequency_weighting(
    freqs_per_sae: &BTreeMap<String, BTreeMap<u32, f64>>,
    n_bins: usize,
) -> Result<FrequencyWeighting, AggregationError> {
    if freqs_per_sae.len() < 2 {
        return Err(AggregationError::TooFewSaes(freqs_per_sae.len()));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for (sae, freqs) in freqs_per_sae {
        if freqs.is_empty() {
            return Err(AggregationError::EmptySae { sae: sae.clone() });
        }
        for (&feature, &f) in freqs {
            if !(f > 0.0) {
                return Err(AggregationError::NonPositiveFrequency {
                    sae: sae.clone(),
                    feature,
                    frequency: f,
                });
            }
            min = min.min(f);
            max = max.max(f);
        }
    }
    let bins = FrequencyBins::log_spaced(min, max, n_bins)?;
    let masses: BTreeMap<&String, Vec<f64>> = freqs_per_sae
        .iter()
        .map(|(sae, freqs)| (sae, bins.masses(freqs.values())))
        .collect();
    let n_sae = masses.len() as f64;
    let first = masses.values().next().expect("at least two SAEs");
    // Identical histograms need no reweighting; taking the shared histogram
    // as the target keeps every weight exactly one instead of one up to the
    // rounding of the average.
    let target: Vec<f64> = if masses.values().all(|m| m == first) {
        first.clone()
    } else {
        (0..bins.len())
            .map(|b| masses.values().map(|m| m[b]).sum::<f64>() / n_sae)
            .collect()
    };

    let mut per_sae = BTreeMap::new();
    for (sae, freqs) in freqs_per_sae {
        let mass = &masses[sae];
        let uncovered: f64 = (0..bins.len())
            .filter(|&b| mass[b] == 0.0)
            .map(|b| target[b])
            .sum();
        let mut weights: BTreeMap<u32, f64> = freqs
            .iter()
            .map(|(&feature, &f)| {
                let b = bins.bin_of(f);
                (feature, target[b] / mass[b])
            })
            .collect();
        if uncovered > 0.0 {
            tracing::warn!(
                sae = sae.as_str(),
                uncovered,
                "target frequency mass falls in bins with no features; weighted histogram cannot match"
            );
        } else {
            let mean = weights.values().sum::<f64>() / weights.len() as f64;
            weights.values_mut().for_each(|w| *w /= mean);
        }
        per_sae.insert(
            sae.clone(),
            SaeWeights {
                weights,
                bin_mass: mass.clone(),
                uncovered_target_mass: uncovered,
            },
        );
    }
    Ok(FrequencyWeighting {
        bins,
        target_distribution: target,
        per_sae,
    })
}

/// Ingested and computed per-feature metrics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureMetrics {
    pub frequency: Option<f64>,
    pub max_decoder_cosine: Option<f64>,
    pub interp_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeDescriptor {
    pub sae_id: String,
    pub variant: String,
    pub width: usize,
    pub l0_label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub metric: String,
    pub rho: Option<f64>,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Partition of sampled features by filter outcome. A feature failing both
/// criteria is attributed to the count criterion.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub sampled: usize,
    pub excluded_by_count: usize,
    pub excluded_by_truncation: usize,
    pub passed: usize,
    pub fraction_excluded: f64,
}

impl FilterStats {
    pub fn from_verdicts(verdicts: &[FilterVerdict]) -> Self {
        let mut s = FilterStats {
            sampled: verdicts.len(),
            ..Default::default()
        };
        for v in verdicts {
            if !v.enough_examples {
                s.excluded_by_count += 1;
            } else if !v.passed {
                s.excluded_by_truncation += 1;
            } else {
                s.passed += 1;
            }
        }
        if s.sampled > 0 {
            s.fraction_excluded = 1.0 - s.passed as f64 / s.sampled as f64;
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeReport {
    pub schema: String,
    pub sae_id: String,
    pub variant: String,
    pub width: usize,
    pub l0_label: Option<String>,
    pub n_features_sampled: usize,
    pub n_passed_filter: usize,
    pub n_evaluated: usize,
    pub unevaluated: Vec<Unevaluated>,
    pub mean_sensitivity: Option<f64>,
    pub weighted_mean_sensitivity: Option<f64>,
    /// Counts over `[0, 0.1), …, [0.9, 1.0]`.
    pub sensitivity_histogram: Vec<usize>,
    pub correlations: Vec<CorrelationEntry>,
    pub filter_stats: FilterStats,
    #[serde(default)]
    pub overlap: Vec<OverlapStats>,
    #[serde(default)]
    pub position_rates: Vec<BucketRate>,
    #[serde(default)]
    pub target_positions: Option<PositionHistogram>,
    /// Features with high auto-interpretability but low sensitivity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interp_slice: Option<Vec<u32>>,
}

impl SaeReport {
    pub fn rho(&self, metric: &str) -> Option<f64> {
        self.correlations
            .iter()
            .find(|c| c.metric == metric)
            .and_then(|c| c.rho)
    }
}

pub fn weighted_mean(values: &[(f64, f64)]) -> Option<f64> {
    let total: f64 = values.iter().map(|(_, w)| w).sum();
    (total > 0.0).then(|| values.iter().map(|(v, w)| v * w).sum::<f64>() / total)
}

fn correlation(metric: &str, pairs: Vec<(f64, f64)>) -> CorrelationEntry {
    let n = pairs.len();
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    match spearman(&x, &y) {
        Ok(rho) => CorrelationEntry {
            metric: metric.into(),
            rho: Some(rho),
            n,
            note: None,
        },
        Err(e) => CorrelationEntry {
            metric: metric.into(),
            rho: None,
            n,
            note: Some(e.to_string()),
        },
    }
}

/// Statistics over the records of features that passed filtering.
pub fn aggregate_sae(
    sae: &SaeDescriptor,
    records: &[SensitivityRecord],
    verdicts: &[FilterVerdict],
    metrics: &BTreeMap<u32, FeatureMetrics>,
    weights: Option<&BTreeMap<u32, f64>>,
    unevaluated: &[Unevaluated],
) -> SaeReport {
    let filter_stats = FilterStats::from_verdicts(verdicts);
    let passed: std::collections::BTreeSet<u32> = verdicts
        .iter()
        .filter(|v| v.passed)
        .map(|v| v.feature_id)
        .collect();
    let scored: Vec<&SensitivityRecord> =
        records.iter().filter(|r| passed.contains(&r.feature_id)).collect();

    let mean_sensitivity = (!scored.is_empty())
        .then(|| scored.iter().map(|r| r.sensitivity).sum::<f64>() / scored.len() as f64);
    let weighted_mean_sensitivity = weights.and_then(|w| {
        let pairs: Vec<(f64, f64)> = scored
            .iter()
            .map(|r| (r.sensitivity, w.get(&r.feature_id).copied().unwrap_or(0.0)))
            .collect();
        weighted_mean(&pairs)
    });

    let mut sensitivity_histogram = vec![0usize; SENSITIVITY_HISTOGRAM_BINS];
    for r in &scored {
        let b = ((r.sensitivity * SENSITIVITY_HISTOGRAM_BINS as f64).floor() as usize)
            .min(SENSITIVITY_HISTOGRAM_BINS - 1);
        sensitivity_histogram[b] += 1;
    }

    let metric_pairs = |get: &dyn Fn(&FeatureMetrics) -> Option<f64>| -> Vec<(f64, f64)> {
        scored
            .iter()
            .filter_map(|r| metrics.get(&r.feature_id).and_then(get).map(|m| (r.sensitivity, m)))
            .collect()
    };
    let mut correlations = vec![
        correlation("frequency", metric_pairs(&|m| m.frequency)),
        correlation("max_decoder_cosine", metric_pairs(&|m| m.max_decoder_cosine)),
    ];
    let interp = metric_pairs(&|m| m.interp_score);
    if !interp.is_empty() {
        correlations.push(correlation("interp", interp));
    }

    SaeReport {
        schema: REPORT_SCHEMA.to_owned(),
        sae_id: sae.sae_id.clone(),
        variant: sae.variant.clone(),
        width: sae.width,
        l0_label: sae.l0_label.clone(),
        n_features_sampled: verdicts.len(),
        n_passed_filter: filter_stats.passed,
        n_evaluated: scored.len(),
        unevaluated: unevaluated.to_vec(),
        mean_sensitivity,
        weighted_mean_sensitivity,
        sensitivity_histogram,
        correlations,
        filter_stats,
        overlap: Vec::new(),
        position_rates: Vec::new(),
        target_positions: None,
        interp_slice: None,
    }
}

/// Features with interpretability at least `interp_min` but sensitivity at
/// most `sens_max`, ascending by id.
pub fn interp_threshold_slice(
    records: &[SensitivityRecord],
    interp_scores: &BTreeMap<u32, f64>,
    interp_min: f64,
    sens_max: f64,
) -> Vec<u32> {
    let mut ids: Vec<u32> = records
        .iter()
        .filter(|r| r.sensitivity <= sens_max)
        .filter(|r| interp_scores.get(&r.feature_id).is_some_and(|&s| s >= interp_min))
        .map(|r| r.feature_id)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Reads a two-column `feature_id, score` file (comma or whitespace
/// separated, optional header, `#` comments).
pub fn read_interp_scores(path: &Path) -> Result<BTreeMap<u32, f64>, AggregationError> {
    let text = std::fs::read_to_string(path).map_err(|e| AggregationError::Input {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_interp_scores(&text).map_err(|message| AggregationError::Input {
        path: path.display().to_string(),
        message,
    })
}

pub fn parse_interp_scores(text: &str) -> Result<BTreeMap<u32, f64>, String> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let parsed = match fields.as_slice() {
            [id, score] => id.parse::<u32>().ok().zip(score.parse::<f64>().ok()),
            _ => None,
        };
        match parsed {
            Some((id, score)) if (0.0..=1.0).contains(&score) => {
                out.insert(id, score);
            }
            Some((id, score)) => {
                return Err(format!("line {}: score {score} for feature {id} outside [0, 1]", n + 1))
            }
            None if out.is_empty() && n == 0 => {} // header
            None => return Err(format!("line {}: expected `feature_id, score`", n + 1)),
        }
    }
    Ok(out)
}

/// One row of the run-level summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sae_id: String,
    pub width: usize,
    #[serde(rename = "L0")]
    pub l0: String,
    pub n_sampled: usize,
    pub n_passed: usize,
    pub mean_sensitivity: Option<f64>,
    pub weighted_mean_sensitivity: Option<f64>,
    pub rho_frequency: Option<f64>,
    pub rho_cosine: Option<f64>,
    pub rho_interp: Option<f64>,
}

impl From<&SaeReport> for SummaryRow {
    fn from(r: &SaeReport) -> Self {
        Self {
            sae_id: r.sae_id.clone(),
            width: r.width,
            l0: r.l0_label.clone().unwrap_or_default(),
            n_sampled: r.n_features_sampled,
            n_passed: r.n_passed_filter,
            mean_sensitivity: r.mean_sensitivity,
            weighted_mean_sensitivity: r.weighted_mean_sensitivity,
            rho_frequency: r.rho("frequency"),
            rho_cosine: r.rho("max_decoder_cosine"),
            rho_interp: r.rho("interp"),
        }
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String, AggregationError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| AggregationError::Output {
            path: "summary.csv".into(),
            message: e.to_string(),
        })?;
    }
    if rows.is_empty() {
        w.write_record([
            "sae_id",
            "width",
            "L0",
            "n_sampled",
            "n_passed",
            "mean_sensitivity",
            "weighted_mean_sensitivity",
            "rho_frequency",
            "rho_cosine",
            "rho_interp",
        ])
        .map_err(|e| AggregationError::Output {
            path: "summary.csv".into(),
            message: e.to_string(),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| AggregationError::Output {
        path: "summary.csv".into(),
        message: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::examples::VERDICT_SCHEMA;
    use crate::scoring::SENSITIVITY_SCHEMA;

    fn record(feature_id: u32, sensitivity: f64) -> SensitivityRecord {
        SensitivityRecord {
            schema: SENSITIVITY_SCHEMA.into(),
            feature_id,
            n_samples: 10,
            n_activating: (sensitivity * 10.0).round() as usize,
            sensitivity,
            per_sample: vec![],
            dropped_empty: vec![],
            unscored: vec![],
            partial: false,
        }
    }

    fn verdict(feature_id: u32, count: usize, rate: f64) -> FilterVerdict {
        FilterVerdict {
            schema: VERDICT_SCHEMA.into(),
            feature_id,
            occurrence_count: count,
            enough_examples: count >= 15,
            truncation_rate: rate,
            truncation_tested: 15,
            passed: count >= 15 && rate >= 0.9,
        }
    }

    fn descriptor() -> SaeDescriptor {
        SaeDescriptor {
            sae_id: "a".into(),
            variant: "relu".into(),
            width: 16,
            l0_label: Some("20".into()),
        }
    }

    #[test]
    fn mean_and_weighted_mean() {
        let records = [record(0, 0.8), record(1, 1.0)];
        let verdicts = [verdict(0, 20, 1.0), verdict(1, 20, 1.0)];
        let r = aggregate_sae(&descriptor(), &records, &verdicts, &BTreeMap::new(), None, &[]);
        assert!((r.mean_sensitivity.unwrap() - 0.9).abs() < 1e-15);

        let records = [record(0, 0.5), record(1, 1.0)];
        let w = BTreeMap::from([(0, 2.0), (1, 0.0)]);
        let r = aggregate_sae(&descriptor(), &records, &verdicts, &BTreeMap::new(), Some(&w), &[]);
        assert_eq!(r.weighted_mean_sensitivity, Some(0.5));
    }

    #[test]
    fn mean_uses_only_passed_features() {
        let records = [record(0, 0.2), record(1, 1.0)];
        let verdicts = [verdict(0, 20, 0.5), verdict(1, 20, 1.0), verdict(2, 3, 1.0)];
        let r = aggregate_sae(&descriptor(), &records, &verdicts, &BTreeMap::new(), None, &[]);
        assert_eq!(r.mean_sensitivity, Some(1.0));
        assert_eq!(r.n_passed_filter, 1);
        assert_eq!(r.filter_stats.excluded_by_count, 1);
        assert_eq!(r.filter_stats.excluded_by_truncation, 1);
    }

    #[test]
    fn failing_both_counts_as_count_exclusion() {
        let s = FilterStats::from_verdicts(&[verdict(0, 3, 0.1)]);
        assert_eq!((s.excluded_by_count, s.excluded_by_truncation, s.passed), (1, 0, 0));
    }

    #[test]
    fn slice_by_thresholds() {
        let records = [record(0, 0.4), record(1, 0.9), record(2, 0.1), record(3, 0.5)];
        let scores = BTreeMap::from([(0, 0.95), (1, 0.99), (2, 0.5), (3, 0.9)]);
        assert_eq!(interp_threshold_slice(&records, &scores, 0.9, 0.5), vec![0, 3]);
        assert_eq!(interp_threshold_slice(&records, &scores, 0.9, 1.0), vec![0, 1, 3]);
        assert!(interp_threshold_slice(&records, &BTreeMap::new(), 0.9, 0.5).is_empty());
    }

    #[test]
    fn identical_histograms_weight_one() {
        let freqs: BTreeMap<u32, f64> = (0..50).map(|i| (i, 1e-4 * (1.0 + i as f64))).collect();
        let input: BTreeMap<String, BTreeMap<u32, f64>> =
            ["a", "b", "c"].iter().map(|s| (s.to_string(), freqs.clone())).collect();
        let w = build_frequency_weighting(&input, 20).unwrap();
        for s in w.per_sae.values() {
            assert!(s.weights.values().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn disjoint_bins_leave_residual_mass() {
        // A's features all sit in the low bin, B's in the high bin.
        let a: BTreeMap<u32, f64> = (0..4).map(|i| (i, 1e-4)).collect();
        let b: BTreeMap<u32, f64> = (0..4).map(|i| (i, 1e-2)).collect();
        let input = BTreeMap::from([("a".to_string(), a.clone()), ("b".to_string(), b)]);
        let w = build_frequency_weighting(&input, 2).unwrap();
        assert_eq!(w.target_distribution, vec![0.5, 0.5]);
        let sa = &w.per_sae["a"];
        assert_eq!(sa.uncovered_target_mass, 0.5);
        assert!(sa.weights.values().all(|&x| x == 0.5));
        let masses = w.weighted_masses("a", &a);
        assert_eq!(masses, vec![0.5, 0.0]);
    }

    #[test]
    fn weighting_errors() {
        let one = BTreeMap::from([("a".to_string(), BTreeMap::from([(0, 0.1)]))]);
        assert!(matches!(build_frequency_weighting(&one, 20), Err(AggregationError::TooFewSaes(1))));
        let same = BTreeMap::from([
            ("a".to_string(), BTreeMap::from([(0, 0.1)])),
            ("b".to_string(), BTreeMap::from([(0, 0.1)])),
        ]);
        assert!(matches!(build_frequency_weighting(&same, 20), Err(AggregationError::Degenerate(_))));
        let zero = BTreeMap::from([
            ("a".to_string(), BTreeMap::from([(0, 0.0)])),
            ("b".to_string(), BTreeMap::from([(0, 0.1)])),
        ]);
        assert!(matches!(
            build_frequency_weighting(&zero, 20),
            Err(AggregationError::NonPositiveFrequency { .. })
        ));
    }

    #[test]
    fn bins_cover_range_ends() {
        let b = FrequencyBins::log_spaced(1e-6, 1e-2, 4).unwrap();
        assert_eq!(b.bin_of(1e-6), 0);
        assert_eq!(b.bin_of(1e-2), 3);
        assert_eq!(b.bin_of(2e-5), 1);
    }

    #[test]
    fn interp_file_parsing() {
        let m = parse_interp_scores("feature,score\n1, 0.5\n2 0.95\n# note\n").unwrap();
        assert_eq!(m, BTreeMap::from([(1, 0.5), (2, 0.95)]));
        assert!(parse_interp_scores("1,1.5\n").is_err());
        assert!(parse_interp_scores("1,0.5\nbad\n").is_err());
    }

    #[test]
    fn summary_table_columns() {
        let records = [record(0, 0.8), record(1, 1.0)];
        let verdicts = [verdict(0, 20, 1.0), verdict(1, 20, 1.0)];
        let r = aggregate_sae(&descriptor(), &records, &verdicts, &BTreeMap::new(), None, &[]);
        let csv = summary_csv(&[SummaryRow::from(&r)]).unwrap();
        let header = csv.lines().next().unwrap();
        assert_eq!(
            header,
            "sae_id,width,L0,n_sampled,n_passed,mean_sensitivity,weighted_mean_sensitivity,rho_frequency,rho_cosine,rho_interp"
        );
        assert!(csv.lines().nth(1).unwrap().starts_with("a,16,20,2,2,0.9,"));
    }
}
