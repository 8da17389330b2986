//! SAE weights, feature encoding and decoder geometry.
//!
//! Weights are read from a safetensors container. Required tensors (shapes
//! use `M` = width, `D` = d_model):
//!
//! | tensor    | shape        | variants                                   |
//! |-----------|--------------|--------------------------------------------|
//! | `W_enc`   | `M x D`      | all (`D x M` is accepted and transposed)   |
//! | `b_enc`   | `M`          | all (gate bias for `gated`)                |
//! | `W_dec`   | `M x D`      | all (`D x M` is accepted and transposed)   |
//! | `b_dec`   | `D`          | all                                        |
//! | `theta`   | `M`          | `jumprelu` (`threshold` accepted as alias) |
//! | `threshold` | `M` or scalar | optional for `batchtopk`                |
//! | `r_mag`, `b_mag` | `M`   | `gated`                                    |
//!
//! Metadata keys: `variant` (required), `k` (topk variants), `l0_label`,
//! `subtract_decoder_bias` (`"true"` to encode `x - b_dec`).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{ActivationBackend, BackendError};
use crate::corpus::{CorpusSample, TokenSequence};
use crate::linalg::{dot_f64, norm_f64, Matrix};

#[derive(Debug, Error)]
pub enum SaeError {
    #[error("failed to read SAE weights {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed tensor container: {0}")]
    Container(String),
    #[error("missing tensor: {0}")]
    MissingTensor(String),
    #[error("dimension mismatch for {tensor}: expected {expected:?}, found {found:?}")]
    Shape {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid SAE configuration: {0}")]
    InvalidConfig(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("feature {feature} out of range for width {width}")]
    FeatureOutOfRange { feature: u32, width: usize },
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Relu,
    Jumprelu,
    Topk,
    Batchtopk,
    Gated,
    PAnneal,
    MatryoshkaTopk,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Relu,
        Variant::Jumprelu,
        Variant::Topk,
        Variant::Batchtopk,
        Variant::Gated,
        Variant::PAnneal,
        Variant::MatryoshkaTopk,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Relu => "relu",
            Variant::Jumprelu => "jumprelu",
            Variant::Topk => "topk",
            Variant::Batchtopk => "batchtopk",
            Variant::Gated => "gated",
            Variant::PAnneal => "p_anneal",
            Variant::MatryoshkaTopk => "matryoshka_topk",
        }
    }

    fn uses_k(self) -> bool {
        matches!(
            self,
            Variant::Topk | Variant::Batchtopk | Variant::MatryoshkaTopk
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = SaeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| SaeError::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaeModel {
    pub variant: Variant,
    pub width: usize,
    pub d_model: usize,
    pub w_enc: Matrix,
    pub b_enc: Vec<f32>,
    pub w_dec: Matrix,
    pub b_dec: Vec<f32>,
    /// Per-feature threshold: `theta` for jumprelu, optional inference
    /// threshold for batchtopk.
    pub theta: Option<Vec<f32>>,
    pub k: Option<usize>,
    pub r_mag: Option<Vec<f32>>,
    pub b_mag: Option<Vec<f32>>,
    pub l0_label: Option<String>,
    pub subtract_decoder_bias: bool,
}

impl SaeModel {
    /// A plain ReLU SAE; other variants are configured with the `with_*`
    /// builders and checked by [`SaeModel::validate`].
    pub fn relu(w_enc: Matrix, b_enc: Vec<f32>, w_dec: Matrix, b_dec: Vec<f32>) -> Self {
        Self {
            variant: Variant::Relu,
            width: w_enc.rows(),
            d_model: w_enc.cols(),
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            theta: None,
            k: None,
            r_mag: None,
            b_mag: None,
            l0_label: None,
            subtract_decoder_bias: false,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_theta(mut self, theta: Vec<f32>) -> Self {
        self.theta = Some(theta);
        self
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = Some(k);
        self
    }

    pub fn with_magnitude(mut self, r_mag: Vec<f32>, b_mag: Vec<f32>) -> Self {
        self.r_mag = Some(r_mag);
        self.b_mag = Some(b_mag);
        self
    }

    pub fn with_l0_label(mut self, label: impl Into<String>) -> Self {
        self.l0_label = Some(label.into());
        self
    }

    pub fn validate(&self) -> Result<(), SaeError> {
        let (m, d) = (self.width, self.d_model);
        if m == 0 || d == 0 {
            return Err(SaeError::InvalidConfig("width and d_model must be positive".into()));
        }
        let check = |name: &str, found: Vec<usize>, expected: Vec<usize>| {
            if found == expected {
                Ok(())
            } else {
                Err(SaeError::Shape {
                    tensor: name.into(),
                    expected,
                    found,
                })
            }
        };
        check("W_enc", vec![self.w_enc.rows(), self.w_enc.cols()], vec![m, d])?;
        check("b_enc", vec![self.b_enc.len()], vec![m])?;
        check("W_dec", vec![self.w_dec.rows(), self.w_dec.cols()], vec![m, d])?;
        check("b_dec", vec![self.b_dec.len()], vec![d])?;
        if let Some(theta) = &self.theta {
            check("theta", vec![theta.len()], vec![m])?;
        }
        match self.variant {
            Variant::Jumprelu if self.theta.is_none() => {
                return Err(SaeError::MissingTensor("theta".into()))
            }
            Variant::Gated => {
                let r = self.r_mag.as_ref().ok_or_else(|| SaeError::MissingTensor("r_mag".into()))?;
                let b = self.b_mag.as_ref().ok_or_else(|| SaeError::MissingTensor("b_mag".into()))?;
                check("r_mag", vec![r.len()], vec![m])?;
                check("b_mag", vec![b.len()], vec![m])?;
            }
            _ => {}
        }
        if self.variant.uses_k() {
            let needs_k = !(self.variant == Variant::Batchtopk && self.theta.is_some());
            match self.k {
                Some(k) if (1..=m).contains(&k) => {}
                Some(k) => {
                    return Err(SaeError::InvalidConfig(format!(
                        "{} requires 1 <= k <= {m}, got k = {k}",
                        self.variant
                    )))
                }
                None if needs_k => {
                    return Err(SaeError::InvalidConfig(format!("{} requires k", self.variant)))
                }
                None => {}
            }
        }
        Ok(())
    }

    fn check_feature(&self, feature: u32) -> Result<usize, SaeError> {
        let f = feature as usize;
        if f < self.width {
            Ok(f)
        } else {
            Err(SaeError::FeatureOutOfRange {
                feature,
                width: self.width,
            })
        }
    }

    /// Pre-activations `x W_enc^T + b_enc` for one input row, in f64.
    fn pre_activations(&self, x: &[f32], features: impl Iterator<Item = usize>) -> Vec<f64> {
        features
            .map(|i| dot_f64(x, self.w_enc.row(i)) + f64::from(self.b_enc[i]))
            .collect()
    }

    fn prepare_input(&self, row: &[f32]) -> Vec<f32> {
        if self.subtract_decoder_bias {
            row.iter().zip(&self.b_dec).map(|(x, b)| x - b).collect()
        } else {
            row.to_vec()
        }
    }

    /// Whether encoding a subset of features needs the full pre-activation
    /// vector (top-k selection).
    fn needs_full_row(&self) -> bool {
        match self.variant {
            Variant::Topk | Variant::MatryoshkaTopk => true,
            Variant::Batchtopk => self.theta.is_none(),
            _ => false,
        }
    }

    fn encode_row_into(&self, x: &[f32], features: &[usize], out: &mut [f32]) {
        let x = self.prepare_input(x);
        if self.needs_full_row() {
            let z = self.pre_activations(&x, 0..self.width);
            let k = self.k.unwrap_or(self.width);
            let kept = top_k_indices(&z, k);
            let mut keep = vec![false; self.width];
            for i in kept {
                keep[i] = true;
            }
            for (o, &f) in out.iter_mut().zip(features) {
                *o = if keep[f] { z[f].max(0.0) as f32 } else { 0.0 };
            }
            return;
        }
        let z = self.pre_activations(&x, features.iter().copied());
        for ((o, &f), &zf) in out.iter_mut().zip(features).zip(&z) {
            *o = match self.variant {
                Variant::Relu | Variant::PAnneal => zf.max(0.0),
                Variant::Jumprelu | Variant::Batchtopk => {
                    let theta = f64::from(self.theta.as_ref().expect("validated")[f]);
                    if zf > theta {
                        zf.max(0.0)
                    } else {
                        0.0
                    }
                }
                Variant::Gated => {
                    if zf > 0.0 {
                        let r = f64::from(self.r_mag.as_ref().expect("validated")[f]);
                        let b = f64::from(self.b_mag.as_ref().expect("validated")[f]);
                        let mag = r.exp() * dot_f64(&x, self.w_enc.row(f)) + b;
                        mag.max(0.0)
                    } else {
                        0.0
                    }
                }
                Variant::Topk | Variant::MatryoshkaTopk => unreachable!(),
            } as f32;
        }
    }

    /// Encodes a `T x d_model` activation matrix into `T x width` feature
    /// activations.
    pub fn encode(&self, activations: &Matrix) -> Result<Matrix, SaeError> {
        let all: Vec<usize> = (0..self.width).collect();
        self.encode_columns(activations, &all)
    }

    /// Like [`SaeModel::encode`] but returns only the listed feature
    /// columns. Top-k variants still rank against the full feature set.
    pub fn encode_features(&self, activations: &Matrix, features: &[u32]) -> Result<Matrix, SaeError> {
        let cols = features
            .iter()
            .map(|&f| self.check_feature(f))
            .collect::<Result<Vec<_>, _>>()?;
        self.encode_columns(activations, &cols)
    }

    fn encode_columns(&self, activations: &Matrix, cols: &[usize]) -> Result<Matrix, SaeError> {
        if activations.cols() != self.d_model {
            return Err(SaeError::Shape {
                tensor: "activations".into(),
                expected: vec![activations.rows(), self.d_model],
                found: vec![activations.rows(), activations.cols()],
            });
        }
        let mut out = Matrix::zeros(activations.rows(), cols.len());
        for t in 0..activations.rows() {
            self.encode_row_into(activations.row(t), cols, out.row_mut(t));
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, SaeError> {
        let bytes = std::fs::read(path).map_err(|source| SaeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_safetensors(&bytes)
    }

    pub fn from_safetensors(bytes: &[u8]) -> Result<Self, SaeError> {
        let (_, header) = SafeTensors::read_metadata(bytes)
            .map_err(|e| SaeError::Container(e.to_string()))?;
        let meta: HashMap<String, String> = header.metadata().clone().unwrap_or_default();
        let tensors =
            SafeTensors::deserialize(bytes).map_err(|e| SaeError::Container(e.to_string()))?;

        let variant: Variant = meta
            .get("variant")
            .ok_or_else(|| SaeError::InvalidConfig("metadata is missing `variant`".into()))?
            .parse()?;
        let k = meta
            .get("k")
            .map(|k| {
                k.parse::<i64>()
                    .map_err(|_| SaeError::InvalidConfig(format!("invalid k {k:?}")))
            })
            .transpose()?;
        let k = match k {
            Some(k) if k < 0 => {
                return Err(SaeError::InvalidConfig(format!("invalid k {k}")))
            }
            other => other.map(|k| k as usize),
        };

        let vector = |name: &str| -> Result<Option<(Vec<usize>, Vec<f32>)>, SaeError> {
            match tensors.tensor(name) {
                Ok(view) => Ok(Some((view.shape().to_vec(), tensor_values(name, &view)?))),
                Err(_) => Ok(None),
            }
        };
        let require = |name: &str| vector(name)?.ok_or_else(|| SaeError::MissingTensor(name.into()));

        let (b_enc_shape, b_enc) = require("b_enc")?;
        let (b_dec_shape, b_dec) = require("b_dec")?;
        if b_enc_shape.len() != 1 {
            return Err(SaeError::Shape {
                tensor: "b_enc".into(),
                expected: vec![b_enc.len()],
                found: b_enc_shape,
            });
        }
        if b_dec_shape.len() != 1 {
            return Err(SaeError::Shape {
                tensor: "b_dec".into(),
                expected: vec![b_dec.len()],
                found: b_dec_shape,
            });
        }
        let (width, d_model) = (b_enc.len(), b_dec.len());
        let matrix = |name: &str| -> Result<Matrix, SaeError> {
            let (shape, data) = require(name)?;
            match shape.as_slice() {
                [r, c] if *r == width && *c == d_model => {
                    Ok(Matrix::from_vec(*r, *c, data).expect("shape checked"))
                }
                [r, c] if *r == d_model && *c == width => {
                    tracing::debug!(tensor = name, "transposing D x M tensor");
                    Ok(Matrix::from_vec(*r, *c, data).expect("shape checked").transpose())
                }
                _ => Err(SaeError::Shape {
                    tensor: name.into(),
                    expected: vec![width, d_model],
                    found: shape,
                }),
            }
        };
        let w_enc = matrix("W_enc")?;
        let w_dec = matrix("W_dec")?;

        let threshold = |name: &str| -> Result<Option<Vec<f32>>, SaeError> {
            Ok(vector(name)?.map(|(shape, data)| {
                if data.len() == 1 && shape.iter().product::<usize>() == 1 {
                    vec![data[0]; width]
                } else {
                    data
                }
            }))
        };
        let theta = match variant {
            Variant::Jumprelu => match threshold("theta")? {
                Some(t) => Some(t),
                None => threshold("threshold")?,
            },
            Variant::Batchtopk => threshold("threshold")?,
            _ => None,
        };
        let (r_mag, b_mag) = if variant == Variant::Gated {
            (Some(require("r_mag")?.1), Some(require("b_mag")?.1))
        } else {
            (None, None)
        };

        let model = SaeModel {
            variant,
            width,
            d_model,
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            theta,
            k,
            r_mag,
            b_mag,
            l0_label: meta.get("l0_label").cloned(),
            subtract_decoder_bias: meta
                .get("subtract_decoder_bias")
                .is_some_and(|v| v == "true"),
        };
        model.validate()?;
        Ok(model)
    }

    /// Serializes the model as an f32 safetensors container.
    pub fn to_safetensors(&self) -> Result<Vec<u8>, SaeError> {
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        let mut push = |name: &str, shape: Vec<usize>, values: &[f32]| {
            let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            owned.push((name.to_owned(), shape, bytes));
        };
        push("W_enc", vec![self.width, self.d_model], self.w_enc.as_slice());
        push("b_enc", vec![self.width], &self.b_enc);
        push("W_dec", vec![self.width, self.d_model], self.w_dec.as_slice());
        push("b_dec", vec![self.d_model], &self.b_dec);
        if let Some(theta) = &self.theta {
            let name = if self.variant == Variant::Batchtopk { "threshold" } else { "theta" };
            push(name, vec![self.width], theta);
        }
        if let (Some(r), Some(b)) = (&self.r_mag, &self.b_mag) {
            push("r_mag", vec![self.width], r);
            push("b_mag", vec![self.width], b);
        }
        let views = owned
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| SaeError::Container(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut meta = HashMap::new();
        meta.insert("variant".to_owned(), self.variant.to_string());
        if let Some(k) = self.k {
            meta.insert("k".to_owned(), k.to_string());
        }
        if let Some(l0) = &self.l0_label {
            meta.insert("l0_label".to_owned(), l0.clone());
        }
        if self.subtract_decoder_bias {
            meta.insert("subtract_decoder_bias".to_owned(), "true".to_owned());
        }
        let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| SaeError::Container(e.to_string()))?;
        canonical_header(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<(), SaeError> {
        let bytes = self.to_safetensors()?;
        std::fs::write(path, bytes).map_err(|source| SaeError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Rewrites the JSON header with sorted keys. The metadata map is a
/// `HashMap`, so its serialized order would otherwise change between runs
/// and identical models would not produce identical files.
fn canonical_header(mut bytes: Vec<u8>) -> Result<Vec<u8>, SaeError> {
    let corrupt = |e: String| SaeError::Container(format!("serialized header: {e}"));
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let header = &bytes[8..8 + len];
    let mut entries: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(header).map_err(|e| corrupt(e.to_string()))?;
    if let Some(meta) = entries.remove("__metadata__") {
        let meta: BTreeMap<String, String> = serde_json::from_value(meta).map_err(|e| corrupt(e.to_string()))?;
        entries.insert("__metadata__".into(), serde_json::to_value(meta).expect("string map"));
    }
    let canonical = serde_json::to_vec(&entries).map_err(|e| corrupt(e.to_string()))?;
    if canonical.len() > len {
        return Err(corrupt("canonical form is longer than the original".into()));
    }
    let slot = &mut bytes[8..8 + len];
    slot[..canonical.len()].copy_from_slice(&canonical);
    slot[canonical.len()..].fill(b' ');
    Ok(bytes)
}

fn tensor_values(name: &str, view: &TensorView<'_>) -> Result<Vec<f32>, SaeError> {
    let data = view.data();
    let values = match view.dtype() {
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32)
            .collect(),
        Dtype::BF16 => data
            .chunks_exact(2)
            .map(|c| f32::from_bits(u32::from(u16::from_le_bytes([c[0], c[1]])) << 16))
            .collect(),
        other => {
            return Err(SaeError::Container(format!(
                "tensor {name} has unsupported dtype {other:?}"
            )))
        }
    };
    Ok(values)
}

/// Indices of the `k` largest values; ties go to the lower index.
pub(crate) fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Activations of selected features over one token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureActivations {
    pub sequence_ref: String,
    pub feature_ids: Vec<u32>,
    /// `T x feature_ids.len()`, non-negative.
    pub values: Matrix,
}

impl FeatureActivations {
    /// A feature counts as active on a token when its activation is
    /// strictly positive.
    pub fn is_active(&self, token: usize, column: usize) -> bool {
        self.values.get(token, column) > 0.0
    }

    pub fn active_mask(&self) -> Vec<Vec<bool>> {
        (0..self.values.rows())
            .map(|t| self.values.row(t).iter().map(|&v| v > 0.0).collect())
            .collect()
    }

    pub fn column(&self, column: usize) -> Vec<f32> {
        (0..self.values.rows()).map(|t| self.values.get(t, column)).collect()
    }
}

pub fn check_compatible(model: &SaeModel, backend: &dyn ActivationBackend) -> Result<(), SaeError> {
    if backend.d_model() != model.d_model {
        return Err(SaeError::Configuration(format!(
            "backend {} has d_model {}, SAE expects {}",
            backend.name(),
            backend.d_model(),
            model.d_model
        )));
    }
    Ok(())
}

/// Activations of `feature_ids` on raw token ids, skipping provenance checks.
pub fn feature_activations_on_tokens(
    model: &SaeModel,
    backend: &dyn ActivationBackend,
    tokens: &[u32],
    feature_ids: &[u32],
) -> Result<Matrix, SaeError> {
    check_compatible(model, backend)?;
    let acts = backend.activations(tokens)?;
    model.encode_features(&acts, feature_ids)
}

pub fn feature_activation_on_sequence(
    model: &SaeModel,
    backend: &dyn ActivationBackend,
    seq: &TokenSequence,
    feature_ids: &[u32],
) -> Result<FeatureActivations, SaeError> {
    if seq.tokenizer_id != backend.tokenizer_id() {
        return Err(SaeError::Configuration(format!(
            "sequence {} was tokenized with {:?} but backend {} expects {:?}",
            seq.reference(),
            seq.tokenizer_id,
            backend.name(),
            backend.tokenizer_id()
        )));
    }
    let values = feature_activations_on_tokens(model, backend, &seq.tokens, feature_ids)?;
    Ok(FeatureActivations {
        sequence_ref: seq.reference(),
        feature_ids: feature_ids.to_vec(),
        values,
    })
}

/// Largest cosine similarity between the decoder row of `feature_id` and any
/// other decoder row.
pub fn max_decoder_cosine(model: &SaeModel, feature_id: u32) -> Result<f64, SaeError> {
    let f = model.check_feature(feature_id)?;
    if model.width < 2 {
        return Err(SaeError::UndefinedMetric(
            "max decoder cosine needs at least two features".into(),
        ));
    }
    let row = model.w_dec.row(f);
    let norm = norm_f64(row);
    if norm == 0.0 {
        return Err(SaeError::UndefinedMetric(format!(
            "decoder row {feature_id} has zero norm"
        )));
    }
    let best = (0..model.width)
        .filter(|&j| j != f)
        .filter_map(|j| {
            let other = model.w_dec.row(j);
            let n = norm_f64(other);
            (n > 0.0).then(|| (dot_f64(row, other) / (norm * n)).clamp(-1.0, 1.0))
        })
        .fold(f64::NEG_INFINITY, f64::max);
    if best == f64::NEG_INFINITY {
        return Err(SaeError::UndefinedMetric(
            "all other decoder rows have zero norm".into(),
        ));
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureFrequency {
    pub feature_id: u32,
    pub active_tokens: u64,
    pub total_tokens: u64,
    pub frequency: f64,
}

/// Fraction of scanned tokens on which each feature is active.
pub fn feature_frequency(
    model: &SaeModel,
    backend: &dyn ActivationBackend,
    sample: &CorpusSample,
    feature_ids: &[u32],
) -> Result<Vec<FeatureFrequency>, SaeError> {
    if sample.is_empty() {
        return Err(SaeError::Configuration("corpus sample is empty".into()));
    }
    let per_seq = sample
        .sequences
        .par_iter()
        .map(|seq| {
            let acts = feature_activation_on_sequence(model, backend, seq, feature_ids)?;
            let mut counts = vec![0u64; feature_ids.len()];
            for t in 0..acts.values.rows() {
                for (c, &v) in counts.iter_mut().zip(acts.values.row(t)) {
                    *c += u64::from(v > 0.0);
                }
            }
            Ok((counts, seq.len() as u64))
        })
        .collect::<Result<Vec<_>, SaeError>>()?;
    let total: u64 = per_seq.iter().map(|(_, n)| n).sum();
    let mut counts = vec![0u64; feature_ids.len()];
    for (c, _) in &per_seq {
        for (acc, v) in counts.iter_mut().zip(c) {
            *acc += v;
        }
    }
    Ok(feature_ids
        .iter()
        .zip(counts)
        .map(|(&feature_id, active_tokens)| FeatureFrequency {
            feature_id,
            active_tokens,
            total_tokens: total,
            frequency: active_tokens as f64 / total as f64,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_model(variant: Variant) -> SaeModel {
        // W_enc = I(3), so z = x + b_enc.
        let w = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        SaeModel::relu(w.clone(), vec![0.0; 3], w, vec![0.0; 3]).with_variant(variant)
    }

    fn encode_row(model: &SaeModel, row: Vec<f32>) -> Vec<f32> {
        let m = Matrix::from_rows(&[row]).unwrap();
        model.encode(&m).unwrap().row(0).to_vec()
    }

    #[test]
    fn relu_rectifies() {
        let m = identity_model(Variant::Relu);
        assert_eq!(encode_row(&m, vec![-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn jumprelu_thresholds() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = SaeModel::relu(w.clone(), vec![0.0; 2], w, vec![0.0; 2])
            .with_variant(Variant::Jumprelu)
            .with_theta(vec![0.7, 0.7]);
        m.validate().unwrap();
        assert_eq!(encode_row(&m, vec![0.5, 1.2]), vec![0.0, 1.2]);
    }

    #[test]
    fn topk_keeps_largest() {
        let m = identity_model(Variant::Topk).with_k(1);
        m.validate().unwrap();
        assert_eq!(encode_row(&m, vec![0.3, 0.9, 0.5]), vec![0.0, 0.9, 0.0]);
        // Kept values are still rectified.
        assert_eq!(encode_row(&m, vec![-0.3, -0.9, -0.5]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn batchtopk_prefers_threshold_when_present() {
        let m = identity_model(Variant::Batchtopk).with_theta(vec![0.4; 3]);
        m.validate().unwrap();
        assert_eq!(encode_row(&m, vec![0.3, 0.9, 0.5]), vec![0.0, 0.9, 0.5]);
        let m = identity_model(Variant::Batchtopk).with_k(2);
        assert_eq!(encode_row(&m, vec![0.3, 0.9, 0.5]), vec![0.0, 0.9, 0.5]);
    }

    #[test]
    fn gated_uses_gate_and_magnitude() {
        let m = identity_model(Variant::Gated)
            .with_magnitude(vec![0.0, (2.0f32).ln(), 0.0], vec![0.0, 0.0, -5.0]);
        m.validate().unwrap();
        let out = encode_row(&m, vec![-1.0, 1.5, 2.0]);
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 3.0).abs() < 1e-6);
        assert_eq!(out[2], 0.0);
    }

    #[test]
    fn validation_errors() {
        let m = identity_model(Variant::Jumprelu);
        assert_eq!(m.validate().unwrap_err().to_string(), "missing tensor: theta");
        let m = identity_model(Variant::Topk).with_k(0);
        assert!(matches!(m.validate(), Err(SaeError::InvalidConfig(_))));
        let m = identity_model(Variant::Topk).with_k(4);
        assert!(matches!(m.validate(), Err(SaeError::InvalidConfig(_))));
        let mut m = identity_model(Variant::Relu);
        m.b_dec.push(0.0);
        assert!(matches!(m.validate(), Err(SaeError::Shape { .. })));
    }

    #[test]
    fn encode_rejects_wrong_width_input() {
        let m = identity_model(Variant::Relu);
        let x = Matrix::zeros(2, 4);
        assert!(matches!(m.encode(&x), Err(SaeError::Shape { .. })));
    }

    #[test]
    fn safetensors_round_trip_and_shapes() {
        let w_enc = Matrix::from_vec(8, 4, (0..32).map(|i| i as f32 * 0.1).collect()).unwrap();
        let w_dec = Matrix::from_vec(8, 4, (0..32).map(|i| 1.0 - i as f32 * 0.05).collect()).unwrap();
        let m = SaeModel::relu(w_enc, vec![0.5; 8], w_dec, vec![0.1; 4]).with_l0_label("l0_20");
        let loaded = SaeModel::from_safetensors(&m.to_safetensors().unwrap()).unwrap();
        assert_eq!(loaded.width, 8);
        assert_eq!(loaded.d_model, 4);
        assert_eq!(loaded, m);
    }

    #[test]
    fn serialization_is_byte_stable() {
        let mut m = identity_model(Variant::Topk).with_k(2).with_l0_label("l0_2");
        m.subtract_decoder_bias = true;
        let first = m.to_safetensors().unwrap();
        for _ in 0..20 {
            assert_eq!(m.to_safetensors().unwrap(), first);
        }
        assert_eq!(SaeModel::from_safetensors(&first).unwrap(), m);
    }

    fn container(tensors: &[(&str, Vec<usize>)], meta: &[(&str, &str)]) -> Vec<u8> {
        let owned: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
            .iter()
            .map(|(n, shape)| {
                let len: usize = shape.iter().product();
                (n.to_string(), shape.clone(), vec![0u8; len * 4])
            })
            .collect();
        let views: Vec<(String, TensorView<'_>)> = owned
            .iter()
            .map(|(n, s, b)| (n.clone(), TensorView::new(Dtype::F32, s.clone(), b).unwrap()))
            .collect();
        let meta = meta.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        safetensors::serialize(views, Some(meta)).unwrap()
    }

    #[test]
    fn load_errors_name_the_problem() {
        let base = [
            ("W_enc", vec![8, 4]),
            ("b_enc", vec![8]),
            ("W_dec", vec![8, 4]),
            ("b_dec", vec![4]),
        ];
        let bytes = container(&base, &[("variant", "jumprelu")]);
        let err = SaeModel::from_safetensors(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "missing tensor: theta");

        let bytes = container(&base, &[("variant", "topk"), ("k", "0")]);
        assert!(SaeModel::from_safetensors(&bytes).is_err());

        let mut bad = base.to_vec();
        bad[2] = ("W_dec", vec![8, 5]);
        let err = SaeModel::from_safetensors(&container(&bad, &[("variant", "relu")])).unwrap_err();
        match err {
            SaeError::Shape { tensor, expected, found } => {
                assert_eq!(tensor, "W_dec");
                assert_eq!(expected, vec![8, 4]);
                assert_eq!(found, vec![8, 5]);
            }
            other => panic!("unexpected {other}"),
        }

        let bytes = container(&base[1..], &[("variant", "relu")]);
        assert_eq!(
            SaeModel::from_safetensors(&bytes).unwrap_err().to_string(),
            "missing tensor: W_enc"
        );
    }

    #[test]
    fn transposed_encoder_is_accepted() {
        let bytes = container(
            &[
                ("W_enc", vec![4, 8]),
                ("b_enc", vec![8]),
                ("W_dec", vec![8, 4]),
                ("b_dec", vec![4]),
                ("threshold", vec![8]),
            ],
            &[("variant", "jumprelu")],
        );
        let m = SaeModel::from_safetensors(&bytes).unwrap();
        assert_eq!((m.width, m.d_model), (8, 4));
        assert!(m.theta.is_some());
    }

    #[test]
    fn max_decoder_cosine_cases() {
        let dec = |rows: &[Vec<f32>]| {
            let w = Matrix::from_rows(rows).unwrap();
            SaeModel::relu(w.clone(), vec![0.0; rows.len()], w, vec![0.0; 2])
        };
        let m = dec(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert!((max_decoder_cosine(&m, 0).unwrap() - 1.0).abs() < 1e-12);
        let m = dec(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(max_decoder_cosine(&m, 0).unwrap(), 0.0);
        let m = dec(&[vec![0.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(max_decoder_cosine(&m, 0), Err(SaeError::UndefinedMetric(_))));
        let m = dec(&[vec![1.0, 0.0]]);
        assert!(matches!(max_decoder_cosine(&m, 0), Err(SaeError::UndefinedMetric(_))));
    }

    #[test]
    fn top_k_tie_break_is_lowest_index() {
        assert_eq!(top_k_indices(&[1.0, 2.0, 2.0, 0.5], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[1.0, 1.0, 1.0], 1), vec![0]);
    }
}
