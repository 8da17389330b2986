//! Run configuration, stage orchestration and manifest tracking.
//!
//! A run directory holds one subdirectory per SAE plus run-level tables and
//! `manifest.json`. Each stage records the SHA-256 of its inputs and outputs
//! and the hash of the stage record it builds on, so later stages can refuse
//! to run on missing or modified artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aggregation::{
    aggregate_sae, build_frequency_weighting, interp_threshold_slice, read_interp_scores,
    summary_csv, AggregationError, FeatureMetrics, SaeDescriptor, SummaryRow,
    DEFAULT_FREQUENCY_BINS,
};
use crate::annotation::{build_session, session_path, AnnotationError, Mix, SessionInputs};
use crate::backend::{ActivationBackend, BackendError, RemoteBackend, RemoteConfig, RemoteTokenizer, SyntheticBackend};
use crate::corpus::{load_corpus, sample_sequences, CorpusError, CorpusFormat, CorpusSample};
use crate::examples::{
    collect_many, filter_feature, truncation_activation_rate, CollectConfig, CollectError,
    ExampleSet, FilterConfig, FilterVerdict, TruncationOutcome,
};
use crate::generation::{
    generate_many, target_position_histogram, CachedTransport, GenerationConfig,
    GenerationResult, GenerationStatus, LlmTransport, OpenAiTransport, RateLimiter,
    ScriptedTransport, TransportError,
};
use crate::overlap::{ccdf_from_lengths, feature_overlap_lengths};
use crate::prompt::{build_prompt, template_hash, RequestParams};
use crate::sae::{check_compatible, max_decoder_cosine, SaeError, SaeModel};
use crate::scoring::{position_stratified_rates, score_run, ScoreError, SensitivityRecord, Unevaluated};
use crate::tokenizer::{Tokenizer, TokenizerError, WhitespaceTokenizer};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA: &str = "manifest/1";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{0}")]
    Chain(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Sae(#[from] SaeError),
    #[error(transparent)]
    Collect(#[from] CollectError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: CorpusFormat,
    #[serde(default = "default_token_budget")]
    pub token_budget: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
}

fn default_format() -> CorpusFormat {
    CorpusFormat::Auto
}

fn default_token_budget() -> usize {
    2_000_000
}

fn default_seq_len() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TokenizerConfig {
    /// Whitespace tokenizer over a vocabulary file, one entry per line.
    Whitespace { vocab: PathBuf },
    /// Tokenization served by the remote activation backend.
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    /// `synthetic` or `remote`.
    pub kind: String,
    #[serde(default)]
    pub seed: u64,
    /// Words whose presence shifts every later position (synthetic only).
    #[serde(default)]
    pub carry_tokens: Vec<String>,
    #[serde(default)]
    pub url: Option<String>,
    /// Tokenizer identifier reported by the remote backend.
    #[serde(default)]
    pub tokenizer_id: Option<String>,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_attempts() -> u32 {
    3
}

fn default_timeout() -> u64 {
    60
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeSpec {
    pub id: String,
    pub path: PathBuf,
    /// Two-column auto-interpretability scores file.
    #[serde(default)]
    pub interp_scores: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Features drawn uniformly per SAE; ignored when `features` is set.
    #[serde(default = "default_n_features")]
    pub n_features: usize,
    #[serde(default)]
    pub features: Option<Vec<u32>>,
}

fn default_n_features() -> usize {
    1000
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_features: default_n_features(),
            features: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSettings {
    #[serde(default = "default_min_examples")]
    pub min_examples: usize,
    #[serde(default = "default_truncation_cutoff")]
    pub truncation_cutoff: f64,
}

fn default_min_examples() -> usize {
    15
}

fn default_truncation_cutoff() -> f64 {
    0.9
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            min_examples: default_min_examples(),
            truncation_cutoff: default_truncation_cutoff(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSettings {
    /// `scripted` or `openai`.
    #[serde(default = "default_transport")]
    pub transport: String,
    #[serde(default)]
    pub script: Option<PathBuf>,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub request_seed: Option<u64>,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_min_samples")]
    pub min_samples: usize,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default)]
    pub retry_backoff_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub requests_per_minute: Option<f64>,
    /// Response cache; defaults to `<out>/llm_cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_transport() -> String {
    "scripted".into()
}

fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}

fn default_model() -> String {
    RequestParams::default().model
}

fn default_temperature() -> f64 {
    1.0
}

fn default_max_tokens() -> u32 {
    2048
}

fn default_n_samples() -> usize {
    11
}

fn default_min_samples() -> usize {
    5
}

fn default_in_flight() -> usize {
    4
}

impl Default for GenerationSettings {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSettings {
    #[serde(default = "default_bins")]
    pub frequency_bins: usize,
    #[serde(default = "default_overlap_n")]
    pub overlap_max_n: usize,
    #[serde(default = "default_interp_min")]
    pub interp_min: f64,
    #[serde(default = "default_sens_max")]
    pub sensitivity_max: f64,
}

fn default_bins() -> usize {
    DEFAULT_FREQUENCY_BINS
}

fn default_overlap_n() -> usize {
    20
}

fn default_interp_min() -> f64 {
    0.9
}

fn default_sens_max() -> f64 {
    0.5
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSettings {
    /// Defaults to `<out>/annotation`.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// SAE whose artifacts feed sessions; defaults to the first.
    #[serde(default)]
    pub sae: Option<String>,
    #[serde(default = "default_n_items")]
    pub n_items: usize,
    #[serde(default = "default_mix")]
    pub mix: String,
    #[serde(default)]
    pub session_seed: u64,
    #[serde(default = "default_interp_min")]
    pub interp_threshold: f64,
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
    #[serde(default = "default_port")]
    pub port: u16,
}

fn default_n_items() -> usize {
    102
}

fn default_mix() -> String {
    "0.2,0.2,0.6".into()
}

fn default_port() -> u16 {
    8080
}

impl Default for AnnotationSettings {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

/// Complete description of a run. Relative paths resolve against the
/// directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub tokenizer: TokenizerConfig,
    pub backend: BackendConfig,
    #[serde(rename = "sae")]
    pub saes: Vec<SaeSpec>,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub collect: CollectConfig,
    #[serde(default)]
    pub filter: FilterSettings,
    #[serde(default)]
    pub generation: GenerationSettings,
    #[serde(default)]
    pub analysis: AnalysisSettings,
    #[serde(default)]
    pub annotation: AnnotationSettings,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub features: Option<Vec<u32>>,
    pub cutoff_truncation: Option<f64>,
    pub cutoff_count: Option<usize>,
    pub backend: Option<String>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut config: RunConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.base_dir = base_dir.to_owned();
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(f) = &o.features {
            self.sampling.features = Some(f.clone());
        }
        if let Some(c) = o.cutoff_truncation {
            self.filter.truncation_cutoff = c;
        }
        if let Some(c) = o.cutoff_count {
            self.filter.min_examples = c;
        }
        if let Some(b) = &o.backend {
            if b.starts_with("http://") || b.starts_with("https://") {
                self.backend.kind = "remote".into();
                self.backend.url = Some(b.clone());
            } else {
                self.backend.kind = b.clone();
            }
        }
        if let Some(out) = &o.out {
            // Flag paths are relative to the working directory.
            self.out = std::path::absolute(out).unwrap_or_else(|_| out.clone());
        }
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_owned()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.out)
    }

    pub fn sae_dir(&self, sae_id: &str) -> PathBuf {
        self.out_dir().join(sae_id)
    }

    pub fn cache_dir(&self) -> PathBuf {
        match &self.generation.cache_dir {
            Some(p) => self.resolve(p),
            None => self.out_dir().join("llm_cache"),
        }
    }

    pub fn annotation_dir(&self) -> PathBuf {
        match &self.annotation.data_dir {
            Some(p) => self.resolve(p),
            None => self.out_dir().join("annotation"),
        }
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            min_examples: self.filter.min_examples,
            truncation_cutoff: self.filter.truncation_cutoff,
        }
    }

    /// Checks ranges and that every referenced input file exists.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let t = self.filter.truncation_cutoff;
        if !(t > 0.0 && t <= 1.0) {
            return bad(format!("truncation cutoff must lie in (0, 1], got {t}"));
        }
        if self.filter.min_examples < 1 {
            return bad("count cutoff must be at least 1".into());
        }
        if self.sampling.n_features < 1 && self.sampling.features.is_none() {
            return bad("sampling.n_features must be at least 1".into());
        }
        if self.generation.n_samples < 1 || self.generation.min_samples < 1 {
            return bad("generation sample counts must be at least 1".into());
        }
        if self.saes.is_empty() {
            return bad("at least one [[sae]] entry is required".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.saes {
            let valid = !s.id.is_empty()
                && s.id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
                && !s.id.starts_with('.');
            if !valid {
                return bad(format!("SAE id {:?} must be a plain file name", s.id));
            }
            if !ids.insert(&s.id) {
                return bad(format!("duplicate SAE id {:?}", s.id));
            }
        }
        let mut paths = vec![("corpus", &self.corpus.path)];
        if let TokenizerConfig::Whitespace { vocab } = &self.tokenizer {
            paths.push(("vocabulary", vocab));
        }
        for s in &self.saes {
            paths.push(("SAE weights", &s.path));
            if let Some(p) = &s.interp_scores {
                paths.push(("interp scores", p));
            }
        }
        if self.generation.transport == "scripted" {
            match &self.generation.script {
                Some(p) => paths.push(("generation script", p)),
                None => return bad("scripted transport needs generation.script".into()),
            }
        }
        for (what, p) in paths {
            let full = self.resolve(p);
            if !full.exists() {
                return bad(format!("{what} file {} does not exist", full.display()));
            }
        }
        match self.backend.kind.as_str() {
            "synthetic" => {}
            "remote" if self.backend.url.is_some() => {}
            "remote" => return bad("remote backend needs backend.url".into()),
            k => return bad(format!("unknown backend kind {k:?}")),
        }
        if !matches!(self.generation.transport.as_str(), "scripted" | "openai") {
            return bad(format!("unknown transport {:?}", self.generation.transport));
        }
        self.annotation.mix.parse::<Mix>()?;
        Ok(())
    }

    /// Hash of everything that determines the artifacts. Paths are hashed
    /// as written, so identical configs in different directories agree.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.generation.cache_dir = None;
        c.annotation = AnnotationSettings::default();
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, PipelineError> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Collect,
    Generate,
    Score,
    Analyze,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Collect, Stage::Generate, Stage::Score, Stage::Analyze];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Collect => "collect",
            Stage::Generate => "generate",
            Stage::Score => "score",
            Stage::Analyze => "analyze",
        }
    }

    fn previous(self) -> Option<Stage> {
        match self {
            Stage::Collect => None,
            Stage::Generate => Some(Stage::Collect),
            Stage::Score => Some(Stage::Generate),
            Stage::Analyze => Some(Stage::Score),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    /// Hash of the previous stage's record.
    pub parent: Option<String>,
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the run directory -> SHA-256.
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub partial: bool,
}

impl StageRecord {
    fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("record serializes").as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            schema: MANIFEST_SCHEMA.to_owned(),
            stages: BTreeMap::new(),
        }
    }
}

impl Manifest {
    pub fn load(out: &Path) -> Result<Self, PipelineError> {
        let path = out.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        read_json(&path)
    }

    pub fn save(&self, out: &Path) -> Result<(), PipelineError> {
        write_json(&out.join(MANIFEST_FILE), self)
    }

    /// Checks that `stage`'s prerequisite ran and its outputs are intact;
    /// returns the hash of its record.
    pub fn require_before(&self, stage: Stage, out: &Path) -> Result<Option<String>, PipelineError> {
        let Some(prev) = stage.previous() else {
            return Ok(None);
        };
        let record = self.stages.get(prev.name()).ok_or_else(|| {
            PipelineError::Chain(format!(
                "stage {} has no {} artifacts: run stage {} first",
                stage.name(),
                prev.name(),
                prev.name()
            ))
        })?;
        if let Some(parent_stage) = prev.previous() {
            let parent = self.stages.get(parent_stage.name()).map(StageRecord::hash);
            if parent != record.parent {
                return Err(PipelineError::Chain(format!(
                    "stage {} is stale because {} was rerun: run stage {} first",
                    prev.name(),
                    parent_stage.name(),
                    prev.name()
                )));
            }
        }
        for (rel, hash) in &record.outputs {
            let path = out.join(rel);
            let actual = file_sha256(&path).map_err(|_| {
                PipelineError::Chain(format!(
                    "{} output {} is missing: run stage {} first",
                    prev.name(),
                    path.display(),
                    prev.name()
                ))
            })?;
            if &actual != hash {
                return Err(PipelineError::Chain(format!(
                    "{} output {} changed since the stage ran: run stage {} first",
                    prev.name(),
                    path.display(),
                    prev.name()
                )));
            }
        }
        Ok(Some(record.hash()))
    }

    /// Records `stage` and drops any later stages, which are now stale.
    pub fn record(&mut self, stage: Stage, record: StageRecord) {
        for later in Stage::ALL.iter().filter(|s| **s > stage) {
            self.stages.remove(later.name());
        }
        self.stages.insert(stage.name().to_owned(), record);
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Parse {
                path: format!("{}:{}", path.display(), i + 1),
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).expect("row serializes"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let parent = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = parent.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Per-feature measurements written by `collect`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub feature_id: u32,
    pub active_tokens: u64,
    pub scanned_tokens: u64,
    pub frequency: f64,
    pub max_decoder_cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub feature_id: u32,
    pub reason: String,
}

/// Artifact file names inside an SAE directory.
pub mod files {
    pub const EXAMPLES: &str = "examples.jsonl";
    pub const VERDICTS: &str = "verdicts.jsonl";
    pub const METRICS: &str = "metrics.jsonl";
    pub const GENERATIONS: &str = "generations.jsonl";
    pub const GENERATION_FAILURES: &str = "generation_failures.jsonl";
    pub const SENSITIVITY: &str = "sensitivity.jsonl";
    pub const UNEVALUATED: &str = "unevaluated.jsonl";
    pub const REPORT: &str = "report.json";
    pub const SUMMARY_CSV: &str = "summary.csv";
    pub const SUMMARY_JSON: &str = "summary.json";
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageOutcome {
    /// Some features could not be evaluated; artifacts are still usable.
    pub partial: bool,
    pub notes: Vec<String>,
}

/// Loaded tokenizer, backend and SAEs for one run.
pub struct Runner {
    pub config: RunConfig,
    tokenizer: Box<dyn Tokenizer>,
    backend: Option<Box<dyn ActivationBackend>>,
    saes: Vec<(SaeSpec, SaeModel)>,
    inputs: BTreeMap<String, String>,
}

impl Runner {
    pub fn new(config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let mut inputs = BTreeMap::new();
        inputs.insert("config".into(), config.fingerprint());
        inputs.insert("corpus".into(), file_sha256(&config.resolve(&config.corpus.path))?);

        let remote = |tokenizer_id: String, d_model: usize| RemoteConfig {
            url: config.backend.url.clone().unwrap_or_default(),
            d_model,
            tokenizer_id,
            max_attempts: config.backend.max_attempts,
            timeout_secs: config.backend.timeout_secs,
            backoff_ms: 200,
        };

        let mut saes = Vec::new();
        for spec in &config.saes {
            let path = config.resolve(&spec.path);
            inputs.insert(format!("sae:{}", spec.id), file_sha256(&path)?);
            saes.push((spec.clone(), SaeModel::load(&path)?));
        }
        let d_model = saes[0].1.d_model;
        if let Some((s, _)) = saes.iter().find(|(_, m)| m.d_model != d_model) {
            return Err(PipelineError::Config(format!(
                "SAE {} has a different d_model than {}",
                s.id, saes[0].0.id
            )));
        }

        let tokenizer: Box<dyn Tokenizer> = match &config.tokenizer {
            TokenizerConfig::Whitespace { vocab } => {
                let path = config.resolve(vocab);
                inputs.insert("vocabulary".into(), file_sha256(&path)?);
                Box::new(WhitespaceTokenizer::from_vocab_file(&path)?)
            }
            TokenizerConfig::Remote => {
                let id = config.backend.tokenizer_id.clone().ok_or_else(|| {
                    PipelineError::Config("remote tokenizer needs backend.tokenizer_id".into())
                })?;
                Box::new(RemoteTokenizer::new(remote(id, d_model))?)
            }
        };

        let backend: Box<dyn ActivationBackend> = match config.backend.kind.as_str() {
            "synthetic" => {
                let mut carry = Vec::new();
                for word in &config.backend.carry_tokens {
                    match tokenizer.encode(word)?.as_slice() {
                        [t] => carry.push(t.id),
                        _ => {
                            return Err(PipelineError::Config(format!(
                                "carry token {word:?} is not a single token"
                            )))
                        }
                    }
                }
                Box::new(
                    SyntheticBackend::new(d_model, config.backend.seed, tokenizer.id())
                        .with_carry_tokens(carry),
                )
            }
            _ => {
                let id = config
                    .backend
                    .tokenizer_id
                    .clone()
                    .unwrap_or_else(|| tokenizer.id().to_owned());
                Box::new(RemoteBackend::new(remote(id, d_model))?)
            }
        };
        for (_, model) in &saes {
            check_compatible(model, backend.as_ref())?;
        }
        Ok(Self {
            config,
            tokenizer,
            backend: Some(backend),
            saes,
            inputs,
        })
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    pub fn backend(&self) -> &dyn ActivationBackend {
        self.backend.as_deref().expect("backend is loaded")
    }

    pub fn saes(&self) -> &[(SaeSpec, SaeModel)] {
        &self.saes
    }

    fn out(&self) -> PathBuf {
        self.config.out_dir()
    }

    fn finish(
        &self,
        stage: Stage,
        mut manifest: Manifest,
        parent: Option<String>,
        inputs: BTreeMap<String, String>,
        outputs: &[PathBuf],
        partial: bool,
    ) -> Result<(), PipelineError> {
        let out = self.out();
        let mut hashes = BTreeMap::new();
        for p in outputs {
            let rel = p
                .strip_prefix(&out)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/");
            hashes.insert(rel, file_sha256(p)?);
        }
        manifest.record(
            stage,
            StageRecord {
                config_hash: self.config.fingerprint(),
                parent,
                inputs,
                outputs: hashes,
                partial,
            },
        );
        manifest.save(&out)
    }

    /// Feature ids to evaluate for one SAE, ascending.
    pub fn sampled_features(&self, model: &SaeModel) -> Result<Vec<u32>, PipelineError> {
        if let Some(f) = &self.config.sampling.features {
            let mut f = f.clone();
            f.sort_unstable();
            f.dedup();
            if let Some(bad) = f.iter().find(|&&x| x as usize >= model.width) {
                return Err(PipelineError::Config(format!(
                    "feature {bad} out of range for width {}",
                    model.width
                )));
            }
            return Ok(f);
        }
        let n = self.config.sampling.n_features.min(model.width);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut ids: Vec<u32> = rand::seq::index::sample(&mut rng, model.width, n)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        ids.sort_unstable();
        Ok(ids)
    }

    pub fn corpus_sample(&self) -> Result<CorpusSample, PipelineError> {
        let c = &self.config.corpus;
        let corpus = load_corpus(&self.config.resolve(&c.path), c.format, self.tokenizer())?;
        let sample = sample_sequences(&corpus, c.token_budget, c.seq_len, self.config.seed)?;
        for w in &sample.warnings {
            tracing::warn!("{w}");
        }
        Ok(sample)
    }

    pub fn collect(&self) -> Result<StageOutcome, PipelineError> {
        let out = self.out();
        let manifest = Manifest::load(&out)?;
        let sample = self.corpus_sample()?;
        tracing::info!(
            sequences = sample.sequences.len(),
            tokens = sample.total_tokens,
            "corpus sample drawn"
        );
        let filter = self.config.filter_config();
        let mut outputs = Vec::new();
        let mut outcome = StageOutcome::default();
        for (spec, model) in &self.saes {
            let features = self.sampled_features(model)?;
            tracing::info!(sae = spec.id.as_str(), features = features.len(), "collecting examples");
            let sets = collect_many(
                model,
                self.backend(),
                &sample,
                &features,
                &self.config.collect,
                self.config.seed,
            )?;
            let mut verdicts = Vec::with_capacity(sets.len());
            let mut metrics = Vec::with_capacity(sets.len());
            for set in &sets {
                let truncation = if set.is_empty() {
                    TruncationOutcome {
                        tested: 0,
                        activated: 0,
                    }
                } else {
                    truncation_activation_rate(model, self.backend(), self.tokenizer(), set)?
                };
                let v = filter_feature(set.feature_id, set.occurrence_count, truncation, &filter);
                tracing::debug!(
                    sae = spec.id.as_str(),
                    feature = set.feature_id,
                    passed = v.passed,
                    "filtered"
                );
                verdicts.push(v);
                metrics.push(MetricsRow {
                    feature_id: set.feature_id,
                    active_tokens: set.active_tokens,
                    scanned_tokens: set.scanned_tokens,
                    frequency: if set.scanned_tokens == 0 {
                        0.0
                    } else {
                        set.active_tokens as f64 / set.scanned_tokens as f64
                    },
                    max_decoder_cosine: max_decoder_cosine(model, set.feature_id)?,
                });
            }
            let passed = verdicts.iter().filter(|v| v.passed).count();
            outcome
                .notes
                .push(format!("{}: {passed} of {} features passed filtering", spec.id, verdicts.len()));
            let dir = self.config.sae_dir(&spec.id);
            for (name, write) in [
                (files::EXAMPLES, write_jsonl(&dir.join(files::EXAMPLES), &sets)),
                (files::VERDICTS, write_jsonl(&dir.join(files::VERDICTS), &verdicts)),
                (files::METRICS, write_jsonl(&dir.join(files::METRICS), &metrics)),
            ] {
                write?;
                outputs.push(dir.join(name));
            }
        }
        self.finish(Stage::Collect, manifest, None, self.inputs.clone(), &outputs, false)?;
        Ok(outcome)
    }

    fn transport(&self) -> Result<Box<dyn LlmTransport>, PipelineError> {
        let g = &self.config.generation;
        let cache = self.cache_dir();
        Ok(match g.transport.as_str() {
            "scripted" => {
                let path = self.config.resolve(g.script.as_ref().expect("validated"));
                Box::new(CachedTransport::new(ScriptedTransport::load(&path)?, cache))
            }
            _ => {
                let endpoint = g.endpoint.clone().unwrap_or_else(|| "https://api.openai.com".into());
                Box::new(CachedTransport::new(
                    OpenAiTransport::new(&endpoint, &g.api_key_env, Duration::from_secs(g.timeout_secs))?,
                    cache,
                ))
            }
        })
    }

    fn cache_dir(&self) -> PathBuf {
        self.config.cache_dir()
    }

    pub fn generate(&self) -> Result<StageOutcome, PipelineError> {
        let out = self.out();
        let manifest = Manifest::load(&out)?;
        let parent = manifest.require_before(Stage::Generate, &out)?;
        let g = &self.config.generation;
        let params = RequestParams {
            model: g.model.clone(),
            temperature: g.temperature,
            max_tokens: g.max_tokens,
            seed: g.request_seed,
        };
        let gen_config = GenerationConfig {
            max_attempts: g.max_attempts,
            min_samples: g.min_samples,
            retry_backoff_ms: g.retry_backoff_ms,
        };
        let transport = self.transport()?;
        let limiter = g.requests_per_minute.map(RateLimiter::per_minute);
        let mut inputs = BTreeMap::new();
        inputs.insert("config".into(), self.config.fingerprint());
        inputs.insert("prompt_templates".into(), template_hash());
        if let Some(script) = &g.script {
            if g.transport == "scripted" {
                inputs.insert("script".into(), file_sha256(&self.config.resolve(script))?);
            }
        }

        let mut outputs = Vec::new();
        let mut outcome = StageOutcome::default();
        for (spec, _) in &self.saes {
            let dir = self.config.sae_dir(&spec.id);
            let verdicts: Vec<FilterVerdict> = read_jsonl(&dir.join(files::VERDICTS))?;
            let sets: BTreeMap<u32, ExampleSet> = read_jsonl::<ExampleSet>(&dir.join(files::EXAMPLES))?
                .into_iter()
                .map(|s| (s.feature_id, s))
                .collect();
            let prompts: Vec<_> = verdicts
                .iter()
                .filter(|v| v.passed)
                .filter_map(|v| sets.get(&v.feature_id))
                .map(|s| (s.feature_id, build_prompt(s, g.n_samples, &params)))
                .collect();
            tracing::info!(sae = spec.id.as_str(), features = prompts.len(), "generating samples");
            let results = generate_many(
                &prompts,
                transport.as_ref(),
                self.tokenizer(),
                &gen_config,
                g.max_in_flight,
                limiter.as_ref(),
            );
            let mut ok = Vec::new();
            let mut failures = Vec::new();
            let (mut prompt_tokens, mut completion_tokens, mut requests) = (0u64, 0u64, 0u64);
            for (feature_id, r) in results {
                match r {
                    Ok(result) => {
                        if let Some(usage) = result.provider_metadata["usage"].as_array() {
                            requests += usage.len() as u64;
                            for u in usage {
                                prompt_tokens += u["prompt_tokens"].as_u64().unwrap_or(0);
                                completion_tokens += u["completion_tokens"].as_u64().unwrap_or(0);
                            }
                        }
                        if result.status == GenerationStatus::LowSample {
                            outcome.partial = true;
                            failures.push(GenerationFailure {
                                feature_id,
                                reason: format!("only {} samples after {} attempts", result.samples.len(), result.attempts),
                            });
                        }
                        ok.push(result);
                    }
                    Err(e) => {
                        outcome.partial = true;
                        failures.push(GenerationFailure {
                            feature_id,
                            reason: e.to_string(),
                        });
                    }
                }
            }
            tracing::info!(
                sae = spec.id.as_str(),
                requests,
                prompt_tokens,
                completion_tokens,
                failures = failures.len(),
                "generation finished"
            );
            outcome.notes.push(format!(
                "{}: {} generated, {} failed or short",
                spec.id,
                ok.len(),
                failures.len()
            ));
            write_jsonl(&dir.join(files::GENERATIONS), &ok)?;
            write_jsonl(&dir.join(files::GENERATION_FAILURES), &failures)?;
            outputs.push(dir.join(files::GENERATIONS));
            outputs.push(dir.join(files::GENERATION_FAILURES));
        }
        self.finish(Stage::Generate, manifest, parent, inputs, &outputs, outcome.partial)?;
        Ok(outcome)
    }

    pub fn score(&self) -> Result<StageOutcome, PipelineError> {
        let out = self.out();
        let manifest = Manifest::load(&out)?;
        let parent = manifest.require_before(Stage::Score, &out)?;
        let mut outputs = Vec::new();
        let mut outcome = StageOutcome::default();
        for (spec, model) in &self.saes {
            let dir = self.config.sae_dir(&spec.id);
            let verdicts: Vec<FilterVerdict> = read_jsonl(&dir.join(files::VERDICTS))?;
            let generations: BTreeMap<u32, GenerationResult> =
                read_jsonl::<GenerationResult>(&dir.join(files::GENERATIONS))?
                    .into_iter()
                    .map(|g| (g.feature_id, g))
                    .collect();
            let failures: BTreeMap<u32, String> =
                read_jsonl::<GenerationFailure>(&dir.join(files::GENERATION_FAILURES))?
                    .into_iter()
                    .map(|f| (f.feature_id, f.reason))
                    .collect();
            let passed: Vec<u32> = verdicts.iter().filter(|v| v.passed).map(|v| v.feature_id).collect();
            let mut scores = score_run(model, self.backend(), self.tokenizer(), &passed, &generations)?;
            for u in &mut scores.unevaluated {
                if let Some(reason) = failures.get(&u.feature_id) {
                    u.reason = reason.clone();
                }
            }
            if !scores.unevaluated.is_empty() || scores.records.iter().any(|r| r.partial) {
                outcome.partial = true;
            }
            outcome.notes.push(format!(
                "{}: {} scored, {} unevaluated",
                spec.id,
                scores.records.len(),
                scores.unevaluated.len()
            ));
            write_jsonl(&dir.join(files::SENSITIVITY), &scores.records)?;
            write_jsonl(&dir.join(files::UNEVALUATED), &scores.unevaluated)?;
            outputs.push(dir.join(files::SENSITIVITY));
            outputs.push(dir.join(files::UNEVALUATED));
        }
        let mut inputs = BTreeMap::new();
        inputs.insert("config".into(), self.config.fingerprint());
        self.finish(Stage::Score, manifest, parent, inputs, &outputs, outcome.partial)?;
        Ok(outcome)
    }

    pub fn analyze(&self) -> Result<StageOutcome, PipelineError> {
        let out = self.out();
        let manifest = Manifest::load(&out)?;
        let parent = manifest.require_before(Stage::Analyze, &out)?;
        let a = &self.config.analysis;
        let mut inputs = BTreeMap::new();
        inputs.insert("config".into(), self.config.fingerprint());

        struct Loaded {
            verdicts: Vec<FilterVerdict>,
            metrics: BTreeMap<u32, FeatureMetrics>,
            records: Vec<SensitivityRecord>,
            unevaluated: Vec<Unevaluated>,
            sets: BTreeMap<u32, ExampleSet>,
            generations: Vec<GenerationResult>,
            interp: Option<BTreeMap<u32, f64>>,
        }
        let mut loaded = Vec::new();
        for (spec, _) in &self.saes {
            let dir = self.config.sae_dir(&spec.id);
            let interp = match &spec.interp_scores {
                Some(p) => {
                    let path = self.config.resolve(p);
                    inputs.insert(format!("interp:{}", spec.id), file_sha256(&path)?);
                    Some(read_interp_scores(&path)?)
                }
                None => None,
            };
            let metrics = read_jsonl::<MetricsRow>(&dir.join(files::METRICS))?
                .into_iter()
                .map(|m| {
                    let interp_score = interp.as_ref().and_then(|s| s.get(&m.feature_id).copied());
                    (
                        m.feature_id,
                        FeatureMetrics {
                            frequency: Some(m.frequency),
                            max_decoder_cosine: Some(m.max_decoder_cosine),
                            interp_score,
                        },
                    )
                })
                .collect();
            loaded.push(Loaded {
                verdicts: read_jsonl(&dir.join(files::VERDICTS))?,
                metrics,
                records: read_jsonl(&dir.join(files::SENSITIVITY))?,
                unevaluated: read_jsonl(&dir.join(files::UNEVALUATED))?,
                sets: read_jsonl::<ExampleSet>(&dir.join(files::EXAMPLES))?
                    .into_iter()
                    .map(|s| (s.feature_id, s))
                    .collect(),
                generations: read_jsonl(&dir.join(files::GENERATIONS))?,
                interp,
            });
        }

        // Frequencies of passed features, per SAE.
        let freqs: BTreeMap<String, BTreeMap<u32, f64>> = self
            .saes
            .iter()
            .zip(&loaded)
            .map(|((spec, _), l)| {
                let f = l
                    .verdicts
                    .iter()
                    .filter(|v| v.passed)
                    .filter_map(|v| Some((v.feature_id, l.metrics.get(&v.feature_id)?.frequency?)))
                    .collect();
                (spec.id.clone(), f)
            })
            .collect();
        let weighting = if freqs.len() >= 2 {
            match build_frequency_weighting(&freqs, a.frequency_bins) {
                Ok(w) => Some(w),
                Err(e) => {
                    tracing::warn!(error = %e, "frequency weighting skipped");
                    None
                }
            }
        } else {
            None
        };

        let mut outputs = Vec::new();
        let mut rows = Vec::new();
        let mut outcome = StageOutcome::default();
        for ((spec, model), l) in self.saes.iter().zip(&loaded) {
            let descriptor = SaeDescriptor {
                sae_id: spec.id.clone(),
                variant: model.variant.as_str().to_owned(),
                width: model.width,
                l0_label: model.l0_label.clone(),
            };
            let weights = weighting.as_ref().and_then(|w| w.per_sae.get(&spec.id)).map(|w| &w.weights);
            let mut report = aggregate_sae(&descriptor, &l.records, &l.verdicts, &l.metrics, weights, &l.unevaluated);

            let scored: std::collections::BTreeSet<u32> = l.records.iter().map(|r| r.feature_id).collect();
            let mut lengths: BTreeMap<_, Vec<usize>> = BTreeMap::new();
            for g in l.generations.iter().filter(|g| scored.contains(&g.feature_id)) {
                let Some(set) = l.sets.get(&g.feature_id) else {
                    continue;
                };
                let examples: Vec<_> = set.examples().collect();
                let generated = g
                    .samples
                    .iter()
                    .map(|s| Ok(self.tokenizer().encode(&s.clean_text)?.into_iter().map(|t| t.id).collect()))
                    .collect::<Result<Vec<Vec<u32>>, TokenizerError>>()?;
                for (kind, v) in feature_overlap_lengths(&examples, &generated) {
                    lengths.entry(kind).or_default().extend(v);
                }
            }
            report.overlap = lengths
                .into_iter()
                .filter_map(|(kind, v)| ccdf_from_lengths(&v, kind, a.overlap_max_n).ok())
                .collect();
            report.position_rates = position_stratified_rates(&l.records);
            report.target_positions = Some(target_position_histogram(
                l.generations.iter().filter(|g| scored.contains(&g.feature_id)),
            ));
            if let Some(interp) = &l.interp {
                report.interp_slice = Some(interp_threshold_slice(&l.records, interp, a.interp_min, a.sensitivity_max));
            }
            if !report.unevaluated.is_empty() {
                outcome.partial = true;
            }
            outcome.notes.push(format!(
                "{}: mean sensitivity {}",
                spec.id,
                report.mean_sensitivity.map_or("n/a".into(), |m| format!("{m:.4}"))
            ));
            let path = self.config.sae_dir(&spec.id).join(files::REPORT);
            write_json(&path, &report)?;
            outputs.push(path);
            rows.push(SummaryRow::from(&report));
        }
        let csv_path = out.join(files::SUMMARY_CSV);
        write_atomic(&csv_path, summary_csv(&rows)?.as_bytes())?;
        let json_path = out.join(files::SUMMARY_JSON);
        write_json(&json_path, &rows)?;
        outputs.push(csv_path);
        outputs.push(json_path);
        if let Some(w) = &weighting {
            let path = out.join("frequency_weighting.json");
            write_json(&path, w)?;
            outputs.push(path);
        }
        self.finish(Stage::Analyze, manifest, parent, inputs, &outputs, outcome.partial)?;
        Ok(outcome)
    }

    /// Runs every stage in order.
    pub fn run_all(&self) -> Result<StageOutcome, PipelineError> {
        let mut total = StageOutcome::default();
        for stage in Stage::ALL {
            let o = match stage {
                Stage::Collect => self.collect(),
                Stage::Generate => self.generate(),
                Stage::Score => self.score(),
                Stage::Analyze => self.analyze(),
            }?;
            total.partial |= o.partial;
            total.notes.extend(o.notes);
        }
        Ok(total)
    }
}

/// Assembles a blinded session from a scored run and stores it where the
/// annotation service finds it.
pub fn build_session_from_run(
    config: &RunConfig,
    session_id: &str,
    seed: u64,
    mix: Mix,
    n_items: usize,
) -> Result<PathBuf, PipelineError> {
    let out = config.out_dir();
    let manifest = Manifest::load(&out)?;
    manifest.require_before(Stage::Analyze, &out)?;
    let spec = match &config.annotation.sae {
        Some(id) => config
            .saes
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| PipelineError::Config(format!("annotation.sae {id:?} is not a configured SAE")))?,
        None => &config.saes[0],
    };
    let dir = config.sae_dir(&spec.id);
    let records: Vec<SensitivityRecord> = read_jsonl(&dir.join(files::SENSITIVITY))?;
    let examples: BTreeMap<u32, ExampleSet> = read_jsonl::<ExampleSet>(&dir.join(files::EXAMPLES))?
        .into_iter()
        .map(|s| (s.feature_id, s))
        .collect();
    let generations: BTreeMap<u32, GenerationResult> =
        read_jsonl::<GenerationResult>(&dir.join(files::GENERATIONS))?
            .into_iter()
            .map(|g| (g.feature_id, g))
            .collect();
    let interp = match &spec.interp_scores {
        Some(p) => Some(read_interp_scores(&config.resolve(p))?),
        None => {
            tracing::warn!("no interp scores configured; every scored feature is eligible");
            None
        }
    };
    let inputs = SessionInputs {
        records: &records,
        examples: &examples,
        generations: &generations,
        interp_scores: interp.as_ref(),
        interp_threshold: config.annotation.interp_threshold,
    };
    let session = build_session(&inputs, session_id, n_items, mix, seed)?;
    let path = session_path(&config.annotation_dir(), session_id);
    session.save(&path)?;
    Ok(path)
}
