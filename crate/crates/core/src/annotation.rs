//! Blinded human-evaluation sessions, rating storage and the HTTP service
//! used by the annotation dashboard.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::examples::{render_example, ExampleSet};
use crate::generation::GenerationResult;
use crate::scoring::SensitivityRecord;

pub const SESSION_SCHEMA: &str = "annotation_session/1";
pub const BLINDED_SESSION_SCHEMA: &str = "annotation_session_view/1";
pub const RESULTS_SCHEMA: &str = "annotation_results/1";
pub const DEFAULT_INTERP_THRESHOLD: f64 = 0.9;
pub const CONTEXT_TOP: usize = 5;
pub const CONTEXT_SAMPLED: usize = 3;

const RATINGS_FILE: &str = "ratings.jsonl";
const AUDIT_FILE: &str = "ratings_audit.jsonl";
const SESSIONS_DIR: &str = "sessions";

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("invalid mix: {0}")]
    InvalidMix(String),
    #[error("not enough eligible items: {category} needs {needed}, only {available} available")]
    Shortfall {
        category: Category,
        needed: usize,
        available: usize,
    },
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("invalid label {0:?}; expected one of indistinguishable, closely_related, weakly_related, unrelated")]
    InvalidLabel(String),
    #[error("invalid rating: {0}")]
    InvalidRating(String),
    #[error("ratings log {path} is corrupt at line {line}: {message}")]
    Corrupt {
        path: String,
        line: usize,
        message: String,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {message}")]
    Json { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnnotationError + '_ {
    move |source| AnnotationError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    PositiveControl,
    NegativeControl,
    MethodGenerated,
}

impl Category {
    pub const ALL: [Category; 3] = [
        Category::PositiveControl,
        Category::NegativeControl,
        Category::MethodGenerated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::PositiveControl => "positive_control",
            Category::NegativeControl => "negative_control",
            Category::MethodGenerated => "method_generated",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Indistinguishable,
    CloselyRelated,
    WeaklyRelated,
    Unrelated,
}

impl Label {
    pub const ALL: [Label; 4] = [
        Label::Indistinguishable,
        Label::CloselyRelated,
        Label::WeaklyRelated,
        Label::Unrelated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Indistinguishable => "indistinguishable",
            Label::CloselyRelated => "closely_related",
            Label::WeaklyRelated => "weakly_related",
            Label::Unrelated => "unrelated",
        }
    }
}

impl FromStr for Label {
    type Err = AnnotationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| AnnotationError::InvalidLabel(s.to_owned()))
    }
}

/// Target fractions of positive controls, negative controls and
/// method-generated probes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mix {
    pub positive: f64,
    pub negative: f64,
    pub method: f64,
}

impl Default for Mix {
    fn default() -> Self {
        Self {
            positive: 0.2,
            negative: 0.2,
            method: 0.6,
        }
    }
}

impl Mix {
    pub fn new(positive: f64, negative: f64, method: f64) -> Result<Self, AnnotationError> {
        let mix = Self {
            positive,
            negative,
            method,
        };
        if [positive, negative, method].iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(AnnotationError::InvalidMix(format!(
                "fractions must lie in [0, 1], got {positive}, {negative}, {method}"
            )));
        }
        if (positive + negative + method - 1.0).abs() > 1e-9 {
            return Err(AnnotationError::InvalidMix(format!(
                "fractions must sum to 1, got {}",
                positive + negative + method
            )));
        }
        Ok(mix)
    }

    /// Item counts for `n` items: controls are rounded to the nearest
    /// integer and method items take the remainder.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let p = ((self.positive * n as f64).round() as usize).min(n);
        let q = ((self.negative * n as f64).round() as usize).min(n - p);
        [p, q, n - p - q]
    }
}

impl FromStr for Mix {
    type Err = AnnotationError;

    /// Parses `positive,negative,method`, e.g. `0.2,0.2,0.6`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| AnnotationError::InvalidMix(format!("{s:?}: {e}")))?;
        match parts.as_slice() {
            [p, n, m] => Mix::new(*p, *n, *m),
            _ => Err(AnnotationError::InvalidMix(format!(
                "{s:?}: expected three comma-separated fractions"
            ))),
        }
    }
}

/// One probe shown next to the context examples of a feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationItem {
    pub item_id: String,
    pub feature_id: u32,
    pub context_examples: Vec<String>,
    pub probe_text: String,
    pub hidden_category: Category,
    /// Feature whose generation supplied the probe; differs from
    /// `feature_id` for negative controls.
    pub probe_source_feature: u32,
}

/// Server-side session, including the unblinding information.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub schema: String,
    pub session_id: String,
    pub seed: u64,
    pub mix: Mix,
    pub items: Vec<AnnotationItem>,
}

impl Session {
    pub fn counts(&self) -> BTreeMap<Category, usize> {
        let mut out = BTreeMap::new();
        for item in &self.items {
            *out.entry(item.hidden_category).or_default() += 1;
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, AnnotationError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| AnnotationError::Json {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), AnnotationError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let text = serde_json::to_string_pretty(self).expect("session serializes");
        fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn blinded(&self, rated: Option<&dyn Fn(&str) -> bool>) -> BlindedSession {
        BlindedSession {
            schema: BLINDED_SESSION_SCHEMA.to_owned(),
            session_id: self.session_id.clone(),
            items: self
                .items
                .iter()
                .map(|item| BlindedItem {
                    item_id: item.item_id.clone(),
                    context_examples: item.context_examples.clone(),
                    probe_text: item.probe_text.clone(),
                    rated: rated.map(|f| f(&item.item_id)),
                })
                .collect(),
        }
    }
}

/// UI-bound view of an item: no category and no feature ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlindedItem {
    pub item_id: String,
    pub context_examples: Vec<String>,
    pub probe_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rated: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlindedSession {
    pub schema: String,
    pub session_id: String,
    pub items: Vec<BlindedItem>,
}

/// Run artifacts a session is assembled from.
pub struct SessionInputs<'a> {
    pub records: &'a [SensitivityRecord],
    pub examples: &'a BTreeMap<u32, ExampleSet>,
    pub generations: &'a BTreeMap<u32, GenerationResult>,
    /// `None` treats every scored feature as eligible.
    pub interp_scores: Option<&'a BTreeMap<u32, f64>>,
    pub interp_threshold: f64,
}

/// Top examples then sampled examples, as shown to annotators.
pub fn context_examples(set: &ExampleSet) -> Vec<String> {
    set.top_examples
        .iter()
        .take(CONTEXT_TOP)
        .chain(set.sampled_examples.iter().take(CONTEXT_SAMPLED))
        .map(render_example)
        .collect()
}

struct Candidate {
    feature_id: u32,
    probe_text: String,
    probe_source_feature: u32,
}

fn take<T>(
    mut pool: Vec<T>,
    n: usize,
    category: Category,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<T>, AnnotationError> {
    if pool.len() < n {
        return Err(AnnotationError::Shortfall {
            category,
            needed: n,
            available: pool.len(),
        });
    }
    pool.shuffle(rng);
    pool.truncate(n);
    Ok(pool)
}

/// Assembles a shuffled, seeded session at the requested mix.
///
/// Positive controls show a feature's held-out activating example. Negative
/// controls show a generated sample of a uniformly chosen different feature.
/// Method items show a generated sample of the feature that did not activate
/// it. Each feature appears at most once per control category.
pub fn build_session(
    inputs: &SessionInputs<'_>,
    session_id: &str,
    n_items: usize,
    mix: Mix,
    seed: u64,
) -> Result<Session, AnnotationError> {
    let mix = Mix::new(mix.positive, mix.negative, mix.method)?;
    let [n_pos, n_neg, n_method] = mix.counts(n_items);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let eligible: Vec<&SensitivityRecord> = inputs
        .records
        .iter()
        .filter(|r| inputs.examples.contains_key(&r.feature_id))
        .filter(|r| match inputs.interp_scores {
            Some(scores) => scores
                .get(&r.feature_id)
                .is_some_and(|&s| s >= inputs.interp_threshold),
            None => true,
        })
        .collect();

    let positives: Vec<Candidate> = eligible
        .iter()
        .filter_map(|r| {
            let held = inputs.examples[&r.feature_id].held_out.as_ref()?;
            Some(Candidate {
                feature_id: r.feature_id,
                probe_text: held.text(),
                probe_source_feature: r.feature_id,
            })
        })
        .collect();

    let mut methods = Vec::new();
    for r in &eligible {
        let Some(gen) = inputs.generations.get(&r.feature_id) else {
            continue;
        };
        for o in r.per_sample.iter().filter(|o| !o.activated) {
            if let Some(sample) = gen.samples.get(o.index) {
                methods.push(Candidate {
                    feature_id: r.feature_id,
                    probe_text: sample.clean_text.clone(),
                    probe_source_feature: r.feature_id,
                });
            }
        }
    }

    let sources: Vec<u32> = inputs
        .generations
        .iter()
        .filter(|(_, g)| !g.samples.is_empty())
        .map(|(&f, _)| f)
        .collect();
    let negative_hosts: Vec<u32> = eligible
        .iter()
        .map(|r| r.feature_id)
        .filter(|f| sources.iter().any(|s| s != f))
        .collect();

    let positives = take(positives, n_pos, Category::PositiveControl, &mut rng)?;
    let hosts = take(negative_hosts, n_neg, Category::NegativeControl, &mut rng)?;
    let methods = take(methods, n_method, Category::MethodGenerated, &mut rng)?;

    let mut negatives = Vec::with_capacity(hosts.len());
    for host in hosts {
        let others: Vec<u32> = sources.iter().copied().filter(|&s| s != host).collect();
        let source = others[rng.random_range(0..others.len())];
        let samples = &inputs.generations[&source].samples;
        let sample = &samples[rng.random_range(0..samples.len())];
        negatives.push(Candidate {
            feature_id: host,
            probe_text: sample.clean_text.clone(),
            probe_source_feature: source,
        });
    }

    let mut drafted: Vec<(Category, Candidate)> = positives
        .into_iter()
        .map(|c| (Category::PositiveControl, c))
        .chain(negatives.into_iter().map(|c| (Category::NegativeControl, c)))
        .chain(methods.into_iter().map(|c| (Category::MethodGenerated, c)))
        .collect();
    drafted.shuffle(&mut rng);

    let items = drafted
        .into_iter()
        .enumerate()
        .map(|(i, (category, c))| AnnotationItem {
            item_id: format!("{session_id}-{i:03}"),
            feature_id: c.feature_id,
            context_examples: context_examples(&inputs.examples[&c.feature_id]),
            probe_text: c.probe_text,
            hidden_category: category,
            probe_source_feature: c.probe_source_feature,
        })
        .collect();
    Ok(Session {
        schema: SESSION_SCHEMA.to_owned(),
        session_id: session_id.to_owned(),
        seed,
        mix,
        items,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub item_id: String,
    pub annotator_id: String,
    pub label: Label,
    /// Seconds since the Unix epoch, assigned by the store.
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub item_id: String,
    pub annotator_id: String,
    pub previous: Label,
    pub replacement: Label,
    pub timestamp: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmitOutcome {
    Stored,
    /// Same label resubmitted; nothing written.
    Unchanged,
    Overwritten,
}

struct StoreState {
    ratings: BTreeMap<(String, String), Rating>,
    log: File,
    log_entries: usize,
}

/// Append-only JSON-lines rating log with an overwrite audit trail.
///
/// Every acknowledged rating has been flushed to disk. A partially written
/// final line, left by a crash mid-append, is discarded on open. The log is
/// compacted to one line per rating when it grows well past the live count.
pub struct RatingStore {
    dir: PathBuf,
    state: Mutex<StoreState>,
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn append_line(file: &mut File, value: &impl Serialize) -> std::io::Result<()> {
    let mut line = serde_json::to_vec(value).expect("rating serializes");
    line.push(b'\n');
    file.write_all(&line)?;
    file.sync_data()
}

impl RatingStore {
    pub fn open(dir: &Path) -> Result<Self, AnnotationError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(RATINGS_FILE);
        let mut ratings = BTreeMap::new();
        let mut log_entries = 0;
        let mut good_len = 0u64;
        if path.exists() {
            let file = File::open(&path).map_err(io_err(&path))?;
            let mut reader = BufReader::new(file);
            let mut line = String::new();
            let mut n = 0;
            loop {
                line.clear();
                let read = reader.read_line(&mut line).map_err(io_err(&path))?;
                if read == 0 {
                    break;
                }
                n += 1;
                let complete = line.ends_with('\n');
                match serde_json::from_str::<Rating>(line.trim_end()) {
                    Ok(r) if complete => {
                        good_len += read as u64;
                        log_entries += 1;
                        ratings.insert((r.item_id.clone(), r.annotator_id.clone()), r);
                    }
                    result => {
                        // Only the final line may be damaged.
                        let mut rest = String::new();
                        reader.read_line(&mut rest).map_err(io_err(&path))?;
                        if !rest.is_empty() {
                            return Err(AnnotationError::Corrupt {
                                path: path.display().to_string(),
                                line: n,
                                message: result
                                    .err()
                                    .map(|e| e.to_string())
                                    .unwrap_or_else(|| "missing newline".into()),
                            });
                        }
                        tracing::warn!(line = n, "discarding torn final line of ratings log");
                        break;
                    }
                }
            }
        }
        let mut log = OpenOptions::new()
            .create(true)
            .read(true)
            .write(true)
            .truncate(false)
            .open(&path)
            .map_err(io_err(&path))?;
        log.set_len(good_len).map_err(io_err(&path))?;
        log.seek(SeekFrom::End(0)).map_err(io_err(&path))?;
        Ok(Self {
            dir: dir.to_owned(),
            state: Mutex::new(StoreState {
                ratings,
                log,
                log_entries,
            }),
        })
    }

    pub fn submit(
        &self,
        item_id: &str,
        annotator_id: &str,
        label: Label,
    ) -> Result<SubmitOutcome, AnnotationError> {
        if annotator_id.trim().is_empty() {
            return Err(AnnotationError::InvalidRating("annotator_id is empty".into()));
        }
        let mut state = self.state.lock();
        let key = (item_id.to_owned(), annotator_id.to_owned());
        let previous = state.ratings.get(&key).map(|r| r.label);
        if previous == Some(label) {
            return Ok(SubmitOutcome::Unchanged);
        }
        let timestamp = now_secs();
        if let Some(previous) = previous {
            let path = self.dir.join(AUDIT_FILE);
            let mut audit = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(io_err(&path))?;
            append_line(
                &mut audit,
                &AuditEntry {
                    item_id: item_id.to_owned(),
                    annotator_id: annotator_id.to_owned(),
                    previous,
                    replacement: label,
                    timestamp,
                },
            )
            .map_err(io_err(&path))?;
        }
        let rating = Rating {
            item_id: item_id.to_owned(),
            annotator_id: annotator_id.to_owned(),
            label,
            timestamp,
        };
        let path = self.dir.join(RATINGS_FILE);
        append_line(&mut state.log, &rating).map_err(io_err(&path))?;
        state.log_entries += 1;
        state.ratings.insert(key, rating);
        if state.log_entries > 2 * state.ratings.len() + 256 {
            self.compact_locked(&mut state)?;
        }
        Ok(if previous.is_some() {
            SubmitOutcome::Overwritten
        } else {
            SubmitOutcome::Stored
        })
    }

    /// Rewrites the log with one line per live rating.
    pub fn compact(&self) -> Result<(), AnnotationError> {
        let mut state = self.state.lock();
        self.compact_locked(&mut state)
    }

    fn compact_locked(&self, state: &mut StoreState) -> Result<(), AnnotationError> {
        let path = self.dir.join(RATINGS_FILE);
        let tmp = self.dir.join(format!("{RATINGS_FILE}.tmp"));
        {
            let mut file = File::create(&tmp).map_err(io_err(&tmp))?;
            let mut buf = Vec::new();
            for r in state.ratings.values() {
                serde_json::to_writer(&mut buf, r).expect("rating serializes");
                buf.push(b'\n');
            }
            file.write_all(&buf).map_err(io_err(&tmp))?;
            file.sync_all().map_err(io_err(&tmp))?;
        }
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        if let Ok(d) = File::open(&self.dir) {
            let _ = d.sync_all();
        }
        let mut log = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        log.seek(SeekFrom::End(0)).map_err(io_err(&path))?;
        state.log = log;
        state.log_entries = state.ratings.len();
        Ok(())
    }

    pub fn ratings(&self) -> Vec<Rating> {
        self.state.lock().ratings.values().cloned().collect()
    }

    pub fn has_rating(&self, item_id: &str, annotator_id: &str) -> bool {
        self.state
            .lock()
            .ratings
            .contains_key(&(item_id.to_owned(), annotator_id.to_owned()))
    }

    pub fn audit_entries(&self) -> Result<Vec<AuditEntry>, AnnotationError> {
        let path = self.dir.join(AUDIT_FILE);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(text
            .lines()
            .filter_map(|l| serde_json::from_str(l).ok())
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryDistribution {
    pub category: Category,
    pub n_ratings: usize,
    pub counts: BTreeMap<Label, usize>,
    pub fractions: BTreeMap<Label, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingDistribution {
    pub schema: String,
    pub rows: Vec<CategoryDistribution>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Per-category label fractions. Categories without ratings are omitted
/// and noted; ratings of unknown items are ignored and noted.
pub fn rating_distribution(
    ratings: &[Rating],
    categories: &HashMap<String, Category>,
) -> RatingDistribution {
    let mut counts: BTreeMap<Category, BTreeMap<Label, usize>> = BTreeMap::new();
    let mut unknown = 0;
    for r in ratings {
        match categories.get(&r.item_id) {
            Some(&c) => *counts.entry(c).or_default().entry(r.label).or_default() += 1,
            None => unknown += 1,
        }
    }
    let mut notes = Vec::new();
    let mut rows = Vec::new();
    for category in Category::ALL {
        let Some(c) = counts.get(&category) else {
            notes.push(format!("no ratings for {category}"));
            continue;
        };
        let n: usize = c.values().sum();
        let counts: BTreeMap<Label, usize> = Label::ALL
            .into_iter()
            .map(|l| (l, c.get(&l).copied().unwrap_or(0)))
            .collect();
        let fractions = counts
            .iter()
            .map(|(&l, &k)| (l, k as f64 / n as f64))
            .collect();
        rows.push(CategoryDistribution {
            category,
            n_ratings: n,
            counts,
            fractions,
        });
    }
    if unknown > 0 {
        notes.push(format!("{unknown} ratings refer to unknown items"));
    }
    RatingDistribution {
        schema: RESULTS_SCHEMA.to_owned(),
        rows,
        notes,
    }
}

/// Shared state of the HTTP service.
pub struct AppState {
    sessions: BTreeMap<String, Session>,
    categories: HashMap<String, Category>,
    store: RatingStore,
}

impl AppState {
    pub fn new(sessions: Vec<Session>, store: RatingStore) -> Self {
        let categories = sessions
            .iter()
            .flat_map(|s| &s.items)
            .map(|i| (i.item_id.clone(), i.hidden_category))
            .collect();
        Self {
            sessions: sessions
                .into_iter()
                .map(|s| (s.session_id.clone(), s))
                .collect(),
            categories,
            store,
        }
    }

    /// Loads every session under `<data_dir>/sessions` and opens the
    /// ratings log in `data_dir`.
    pub fn open(data_dir: &Path) -> Result<Self, AnnotationError> {
        let dir = data_dir.join(SESSIONS_DIR);
        let mut sessions = Vec::new();
        if dir.exists() {
            let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(io_err(&dir))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            paths.sort();
            for p in paths {
                sessions.push(Session::load(&p)?);
            }
        }
        Ok(Self::new(sessions, RatingStore::open(data_dir)?))
    }

    pub fn store(&self) -> &RatingStore {
        &self.store
    }

    pub fn results(&self) -> RatingDistribution {
        rating_distribution(&self.store.ratings(), &self.categories)
    }
}

/// Path where `session build` stores a session for the service.
pub fn session_path(data_dir: &Path, session_id: &str) -> PathBuf {
    data_dir.join(SESSIONS_DIR).join(format!("{session_id}.json"))
}

#[derive(Debug, Deserialize)]
pub struct RatingSubmission {
    pub item_id: String,
    pub annotator_id: String,
    pub label: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RatingAck {
    pub item_id: String,
    pub outcome: SubmitOutcome,
}

#[derive(Debug, Deserialize)]
struct SessionQuery {
    annotator: Option<String>,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        let status = match e {
            AnnotationError::UnknownItem(_) | AnnotationError::UnknownSession(_) => {
                StatusCode::NOT_FOUND
            }
            AnnotationError::InvalidLabel(_) | AnnotationError::InvalidRating(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<SessionQuery>,
) -> Result<Json<BlindedSession>, ApiError> {
    let session = state
        .sessions
        .get(&id)
        .ok_or(AnnotationError::UnknownSession(id))?;
    let view = match &q.annotator {
        Some(a) => session.blinded(Some(&|item: &str| state.store.has_rating(item, a))),
        None => session.blinded(None),
    };
    Ok(Json(view))
}

async fn post_rating(
    State(state): State<Arc<AppState>>,
    Json(body): Json<RatingSubmission>,
) -> Result<Json<RatingAck>, ApiError> {
    if !state.categories.contains_key(&body.item_id) {
        return Err(AnnotationError::UnknownItem(body.item_id).into());
    }
    let label: Label = body.label.parse()?;
    let outcome = tokio::task::spawn_blocking({
        let state = state.clone();
        let (item, annotator) = (body.item_id.clone(), body.annotator_id.clone());
        move || state.store.submit(&item, &annotator, label)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(RatingAck {
        item_id: body.item_id,
        outcome,
    }))
}

async fn get_results(State(state): State<Arc<AppState>>) -> Json<RatingDistribution> {
    Json(state.results())
}

async fn get_health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "sessions": state.sessions.len(),
        "ratings": state.store.ratings().len(),
    }))
}

/// Routes of the annotation service; `static_dir` serves the dashboard.
pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let router = Router::new()
        .route("/session/{id}", get(get_session))
        .route("/rating", post(post_rating))
        .route("/results", get(get_results))
        .route("/health", get(get_health))
        .with_state(state);
    match static_dir {
        Some(dir) => router.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => router,
    }
}
