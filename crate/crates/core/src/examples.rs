//! Activating-example mining, selection and filtering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::ActivationBackend;
use crate::corpus::{CorpusError, CorpusSample, TokenSequence};
use crate::markup;
use crate::sae::{feature_activation_on_sequence, feature_activations_on_tokens, SaeError, SaeModel};
use crate::tokenizer::Tokenizer;

pub const EXAMPLE_SET_SCHEMA: &str = "example_set/1";
pub const VERDICT_SCHEMA: &str = "filter_verdict/1";

#[derive(Debug, Error)]
pub enum CollectError {
    #[error(transparent)]
    Sae(#[from] SaeError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("example set for feature {0} is empty")]
    NoExamples(u32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    /// Tokens kept on each side of the peak token.
    pub context: usize,
    pub n_top: usize,
    pub n_sampled: usize,
    /// Reserve one extra weighted sample for blinded positive controls.
    pub hold_out: bool,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            context: 10,
            n_top: 10,
            n_sampled: 5,
            hold_out: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleSource {
    /// Position of the sequence in the corpus sample.
    pub sequence_index: usize,
    pub sequence_ref: String,
    /// Peak token position within the full sequence.
    pub token_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivatingExample {
    pub tokens: Vec<u32>,
    pub texts: Vec<String>,
    /// Half-open token ranges of maximal activating runs, relative to the
    /// window.
    pub marker_spans: Vec<(usize, usize)>,
    pub peak_activation: f32,
    /// Peak token position within the window.
    pub peak_index: usize,
    pub source: ExampleSource,
}

impl ActivatingExample {
    pub fn text(&self) -> String {
        self.texts.concat()
    }

    /// Index of the last activating token in the window.
    pub fn last_marker(&self) -> Option<usize> {
        self.marker_spans.last().map(|&(_, end)| end - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleSet {
    pub schema: String,
    pub feature_id: u32,
    pub top_examples: Vec<ActivatingExample>,
    pub sampled_examples: Vec<ActivatingExample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held_out: Option<ActivatingExample>,
    /// Number of scanned sequences on which the feature activated.
    pub occurrence_count: usize,
    pub active_tokens: u64,
    pub scanned_tokens: u64,
}

impl ExampleSet {
    /// Top examples followed by the weighted samples; excludes the held-out
    /// control.
    pub fn examples(&self) -> impl Iterator<Item = &ActivatingExample> {
        self.top_examples.iter().chain(&self.sampled_examples)
    }

    pub fn len(&self) -> usize {
        self.top_examples.len() + self.sampled_examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FilterConfig {
    pub min_examples: usize,
    pub truncation_cutoff: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_examples: 15,
            truncation_cutoff: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub schema: String,
    pub feature_id: u32,
    pub occurrence_count: usize,
    pub enough_examples: bool,
    pub truncation_rate: f64,
    pub truncation_tested: usize,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationOutcome {
    pub tested: usize,
    pub activated: usize,
}

impl TruncationOutcome {
    pub fn rate(&self) -> f64 {
        if self.tested == 0 {
            0.0
        } else {
            self.activated as f64 / self.tested as f64
        }
    }
}

/// Raw scan output for one feature: one candidate per activating sequence.
#[derive(Clone, Debug)]
pub struct FeatureScan {
    pub feature_id: u32,
    pub candidates: Vec<ActivatingExample>,
    pub active_tokens: u64,
    pub scanned_tokens: u64,
}

/// Maximal runs of `true` in `mask`, as half-open ranges.
pub fn active_runs(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &on) in mask.iter().enumerate() {
        match (on, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, mask.len()));
    }
    runs
}

/// Builds the context window around the highest activation of one sequence,
/// or `None` when the feature never fires on it. The earliest maximum wins.
pub fn extract_example(
    seq: &TokenSequence,
    sequence_index: usize,
    values: &[f32],
    context: usize,
) -> Option<ActivatingExample> {
    let (peak, &peak_value) = values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .fold(None::<(usize, &f32)>, |best, cur| match best {
            Some(b) if *b.1 >= *cur.1 => Some(b),
            _ => Some(cur),
        })?;
    let start = peak.saturating_sub(context);
    let end = (peak + context + 1).min(seq.len());
    let mask: Vec<bool> = values[start..end].iter().map(|&v| v > 0.0).collect();
    Some(ActivatingExample {
        tokens: seq.tokens[start..end].to_vec(),
        texts: seq.texts[start..end].to_vec(),
        marker_spans: active_runs(&mask),
        peak_activation: peak_value,
        peak_index: peak - start,
        source: ExampleSource {
            sequence_index,
            sequence_ref: seq.reference(),
            token_index: peak,
        },
    })
}

/// Scans every sequence of `sample` once, encoding all requested features
/// together.
pub fn scan_features(
    model: &SaeModel,
    backend: &dyn ActivationBackend,
    sample: &CorpusSample,
    feature_ids: &[u32],
    context: usize,
) -> Result<Vec<FeatureScan>, CollectError> {
    let per_seq = sample
        .sequences
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let acts = feature_activation_on_sequence(model, backend, seq, feature_ids)?;
            let out: Vec<(Option<ActivatingExample>, u64)> = (0..feature_ids.len())
                .map(|c| {
                    let col = acts.column(c);
                    let active = col.iter().filter(|&&v| v > 0.0).count() as u64;
                    (extract_example(seq, i, &col, context), active)
                })
                .collect();
            Ok((out, seq.len() as u64))
        })
        .collect::<Result<Vec<_>, SaeError>>()?;

    let scanned: u64 = per_seq.iter().map(|(_, n)| n).sum();
    let mut scans: Vec<FeatureScan> = feature_ids
        .iter()
        .map(|&feature_id| FeatureScan {
            feature_id,
            candidates: Vec::new(),
            active_tokens: 0,
            scanned_tokens: scanned,
        })
        .collect();
    for (per_feature, _) in per_seq {
        for (scan, (candidate, active)) in scans.iter_mut().zip(per_feature) {
            scan.active_tokens += active;
            if let Some(c) = candidate {
                scan.candidates.push(c);
            }
        }
    }
    Ok(scans)
}

/// Per-feature RNG seed derived from the run seed.
pub fn feature_seed(seed: u64, feature_id: u32) -> u64 {
    seed ^ (u64::from(feature_id) + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Draws `n` items without replacement with probability proportional to
/// `weight`, one sequential draw at a time. Returns indices into `weights`
/// in draw order.
pub fn weighted_sample_without_replacement(
    weights: &[f64],
    n: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    let mut drawn = Vec::with_capacity(n.min(remaining.len()));
    while drawn.len() < n && !remaining.is_empty() {
        let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = remaining.len() - 1;
        for (pos, &i) in remaining.iter().enumerate() {
            if u < weights[i] {
                pick = pos;
                break;
            }
            u -= weights[i];
        }
        drawn.push(remaining.remove(pick));
    }
    drawn
}

/// Selects the top examples and importance-weighted samples from a scan.
pub fn select_examples(scan: FeatureScan, config: &CollectConfig, seed: u64) -> ExampleSet {
    let mut candidates = scan.candidates;
    let occurrence_count = candidates.len();
    candidates.sort_by(|a, b| {
        b.peak_activation
            .total_cmp(&a.peak_activation)
            .then(a.source.sequence_index.cmp(&b.source.sequence_index))
            .then(a.source.token_index.cmp(&b.source.token_index))
    });
    let rest = candidates.split_off(config.n_top.min(candidates.len()));
    let top_examples = candidates;

    let mut rng = ChaCha8Rng::seed_from_u64(feature_seed(seed, scan.feature_id));
    let weights: Vec<f64> = rest.iter().map(|e| f64::from(e.peak_activation)).collect();
    let want = config.n_sampled + usize::from(config.hold_out);
    let mut drawn = weighted_sample_without_replacement(&weights, want, &mut rng);
    let held_out = if config.hold_out && drawn.len() > config.n_sampled {
        drawn.pop().map(|i| rest[i].clone())
    } else {
        None
    };
    let sampled_examples = drawn.into_iter().map(|i| rest[i].clone()).collect();

    ExampleSet {
        schema: EXAMPLE_SET_SCHEMA.to_owned(),
        feature_id: scan.feature_id,
        top_examples,
        sampled_examples,
        held_out,
        occurrence_count,
        active_tokens: scan.active_tokens,
        scanned_tokens: scan.scanned_tokens,
    }
}

pub fn collect_examples(
    model: &SaeModel,
    backend: &dyn ActivationBackend,
    sample: &CorpusSample,
    feature_id: u32,
    config: &CollectConfig,
    rng_seed: u64,
) -> Result<ExampleSet, CollectError> {
    let scan = scan_features(model, backend, sample, &[feature_id], config.context)?
        .pop()
        .expect("one scan per feature");
    Ok(select_examples(scan, config, rng_seed))
}

/// Collects example sets for many features in a single pass over the sample.
pub fn collect_many(
    model: &SaeModel,
    backend: &dyn ActivationBackend,
    sample: &CorpusSample,
    feature_ids: &[u32],
    config: &CollectConfig,
    rng_seed: u64,
) -> Result<Vec<ExampleSet>, CollectError> {
    Ok(scan_features(model, backend, sample, feature_ids, config.context)?
        .into_iter()
        .map(|scan| select_examples(scan, config, rng_seed))
        .collect())
}

/// Re-tokenizes each example window on its own and checks whether the
/// feature fires anywhere in it.
pub fn truncation_activation_rate(
    model: &SaeModel,
    backend: &dyn ActivationBackend,
    tokenizer: &dyn Tokenizer,
    examples: &ExampleSet,
) -> Result<TruncationOutcome, CollectError> {
    if examples.is_empty() {
        return Err(CollectError::NoExamples(examples.feature_id));
    }
    let fired = examples
        .examples()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|ex| {
            let tokens: Vec<u32> = tokenizer
                .encode(&ex.text())
                .map_err(CorpusError::from)?
                .into_iter()
                .map(|t| t.id)
                .collect();
            if tokens.is_empty() {
                return Ok(false);
            }
            let values =
                feature_activations_on_tokens(model, backend, &tokens, &[examples.feature_id])?;
            Ok(values.as_slice().iter().any(|&v| v > 0.0))
        })
        .collect::<Result<Vec<bool>, CollectError>>()?;
    Ok(TruncationOutcome {
        tested: fired.len(),
        activated: fired.iter().filter(|&&f| f).count(),
    })
}

pub fn filter_feature(
    feature_id: u32,
    occurrence_count: usize,
    truncation: TruncationOutcome,
    config: &FilterConfig,
) -> FilterVerdict {
    let enough_examples = occurrence_count >= config.min_examples;
    let truncation_rate = truncation.rate();
    FilterVerdict {
        schema: VERDICT_SCHEMA.to_owned(),
        feature_id,
        occurrence_count,
        enough_examples,
        truncation_rate,
        truncation_tested: truncation.tested,
        passed: enough_examples && truncation_rate >= config.truncation_cutoff,
    }
}

/// Re-applies a different filter configuration to an existing verdict.
pub fn refilter(verdict: &FilterVerdict, config: &FilterConfig) -> FilterVerdict {
    let enough_examples = verdict.occurrence_count >= config.min_examples;
    FilterVerdict {
        enough_examples,
        passed: enough_examples && verdict.truncation_rate >= config.truncation_cutoff,
        ..verdict.clone()
    }
}

/// Renders an example with its activating runs wrapped in `{{…}}`.
pub fn render_example(example: &ActivatingExample) -> String {
    markup::render_marked(&example.texts, &example.marker_spans)
}
