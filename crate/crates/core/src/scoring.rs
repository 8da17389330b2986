//! Sensitivity scoring of generated samples.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::ActivationBackend;
use crate::generation::{GeneratedSample, GenerationResult};
use crate::sae::{feature_activations_on_tokens, SaeError, SaeModel};
use crate::tokenizer::{Tokenizer, TokenizerError};

pub const SENSITIVITY_SCHEMA: &str = "sensitivity/1";

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("feature {0} has no samples to score")]
    NoSamples(u32),
    #[error("feature {feature_id}: no sample could be scored ({reason})")]
    NothingScored { feature_id: u32, reason: String },
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub index: usize,
    pub activated: bool,
    pub peak_activation: f32,
    pub first_target_token_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub schema: String,
    pub feature_id: u32,
    pub n_samples: usize,
    pub n_activating: usize,
    pub sensitivity: f64,
    pub per_sample: Vec<SampleOutcome>,
    /// Samples whose text tokenized to nothing; not in the denominator.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped_empty: Vec<usize>,
    /// Samples the backend failed on.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unscored: Vec<usize>,
    pub partial: bool,
}

impl SensitivityRecord {
    /// Builds a record from per-sample outcomes; `None` when nothing was
    /// scored.
    pub fn from_outcomes(feature_id: u32, per_sample: Vec<SampleOutcome>) -> Option<Self> {
        let n_samples = per_sample.len();
        if n_samples == 0 {
            return None;
        }
        let n_activating = per_sample.iter().filter(|o| o.activated).count();
        Some(Self {
            schema: SENSITIVITY_SCHEMA.to_owned(),
            feature_id,
            n_samples,
            n_activating,
            sensitivity: n_activating as f64 / n_samples as f64,
            per_sample,
            dropped_empty: Vec::new(),
            unscored: Vec::new(),
            partial: false,
        })
    }
}

enum Scored {
    Outcome(SampleOutcome),
    Empty,
    Failed(SaeError),
}

/// Fraction of samples on which the feature is active at any position.
pub fn score_feature(
    model: &SaeModel,
    backend: &dyn ActivationBackend,
    tokenizer: &dyn Tokenizer,
    feature_id: u32,
    samples: &[GeneratedSample],
) -> Result<SensitivityRecord, ScoreError> {
    if samples.is_empty() {
        return Err(ScoreError::NoSamples(feature_id));
    }
    if tokenizer.id() != backend.tokenizer_id() {
        return Err(ScoreError::Configuration(format!(
            "scoring tokenizer {:?} does not match backend tokenizer {:?}",
            tokenizer.id(),
            backend.tokenizer_id()
        )));
    }
    let scored = samples
        .par_iter()
        .enumerate()
        .map(|(index, sample)| {
            let tokens: Vec<u32> = tokenizer
                .encode(&sample.clean_text)?
                .into_iter()
                .map(|t| t.id)
                .collect();
            if tokens.is_empty() {
                return Ok(Scored::Empty);
            }
            Ok(match feature_activations_on_tokens(model, backend, &tokens, &[feature_id]) {
                Ok(values) => {
                    let peak = values.as_slice().iter().copied().fold(0.0f32, f32::max);
                    Scored::Outcome(SampleOutcome {
                        index,
                        activated: peak > 0.0,
                        peak_activation: peak,
                        first_target_token_index: sample.first_target_token_index,
                    })
                }
                Err(e) => Scored::Failed(e),
            })
        })
        .collect::<Result<Vec<_>, ScoreError>>()?;

    let mut per_sample = Vec::new();
    let mut dropped_empty = Vec::new();
    let mut unscored = Vec::new();
    let mut last_error = None;
    for (i, s) in scored.into_iter().enumerate() {
        match s {
            Scored::Outcome(o) => per_sample.push(o),
            Scored::Empty => {
                tracing::warn!(feature_id, sample = i, "sample tokenizes to nothing; dropped");
                dropped_empty.push(i);
            }
            Scored::Failed(e) => {
                tracing::warn!(feature_id, sample = i, error = %e, "sample could not be scored");
                unscored.push(i);
                last_error = Some(e.to_string());
            }
        }
    }
    let mut record = SensitivityRecord::from_outcomes(feature_id, per_sample).ok_or_else(|| {
        ScoreError::NothingScored {
            feature_id,
            reason: last_error.unwrap_or_else(|| "all samples were empty".into()),
        }
    })?;
    record.partial = !unscored.is_empty();
    record.dropped_empty = dropped_empty;
    record.unscored = unscored;
    Ok(record)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unevaluated {
    pub feature_id: u32,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunScores {
    pub records: Vec<SensitivityRecord>,
    pub unevaluated: Vec<Unevaluated>,
}

/// Scores every feature with a usable generation; the rest are listed as
/// unevaluated rather than scored zero.
pub fn score_run(
    model: &SaeModel,
    backend: &dyn ActivationBackend,
    tokenizer: &dyn Tokenizer,
    features: &[u32],
    results: &BTreeMap<u32, GenerationResult>,
) -> Result<RunScores, ScoreError> {
    let mut out = RunScores::default();
    for &feature_id in features {
        let Some(result) = results.get(&feature_id) else {
            out.unevaluated.push(Unevaluated {
                feature_id,
                reason: "no generation result".into(),
            });
            continue;
        };
        if !result.is_usable() {
            out.unevaluated.push(Unevaluated {
                feature_id,
                reason: format!("only {} usable samples", result.samples.len()),
            });
            continue;
        }
        match score_feature(model, backend, tokenizer, feature_id, &result.samples) {
            Ok(r) => out.records.push(r),
            Err(e @ ScoreError::Configuration(_)) => return Err(e),
            Err(e) => out.unevaluated.push(Unevaluated {
                feature_id,
                reason: e.to_string(),
            }),
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PositionBucket {
    #[serde(rename = "0")]
    Zero,
    #[serde(rename = "1-5")]
    OneToFive,
    #[serde(rename = "6-10")]
    SixToTen,
    #[serde(rename = "11+")]
    ElevenPlus,
    #[serde(rename = "unmarked")]
    Unmarked,
}

impl PositionBucket {
    pub const ALL: [PositionBucket; 5] = [
        PositionBucket::Zero,
        PositionBucket::OneToFive,
        PositionBucket::SixToTen,
        PositionBucket::ElevenPlus,
        PositionBucket::Unmarked,
    ];

    pub fn of(first_target: Option<usize>) -> Self {
        match first_target {
            None => PositionBucket::Unmarked,
            Some(0) => PositionBucket::Zero,
            Some(1..=5) => PositionBucket::OneToFive,
            Some(6..=10) => PositionBucket::SixToTen,
            Some(_) => PositionBucket::ElevenPlus,
        }
    }
}

impl fmt::Display for PositionBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositionBucket::Zero => "0",
            PositionBucket::OneToFive => "1-5",
            PositionBucket::SixToTen => "6-10",
            PositionBucket::ElevenPlus => "11+",
            PositionBucket::Unmarked => "unmarked",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRate {
    pub bucket: PositionBucket,
    pub n_samples: usize,
    pub n_activating: usize,
    /// `None` for empty buckets.
    pub rate: Option<f64>,
}

/// Activation rate grouped by how many tokens precede the first marked
/// target.
pub fn position_stratified_rates<'a>(
    records: impl IntoIterator<Item = &'a SensitivityRecord>,
) -> Vec<BucketRate> {
    let mut counts: BTreeMap<PositionBucket, (usize, usize)> = BTreeMap::new();
    for o in records.into_iter().flat_map(|r| &r.per_sample) {
        let c = counts.entry(PositionBucket::of(o.first_target_token_index)).or_default();
        c.0 += 1;
        c.1 += usize::from(o.activated);
    }
    PositionBucket::ALL
        .into_iter()
        .map(|bucket| {
            let (n, a) = counts.get(&bucket).copied().unwrap_or_default();
            BucketRate {
                bucket,
                n_samples: n,
                n_activating: a,
                rate: (n > 0).then(|| a as f64 / n as f64),
            }
        })
        .collect()
}
