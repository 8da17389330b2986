//! Deterministic synthetic inputs with known answers.
//!
//! Twenty hand-built detector features over the synthetic backend, a corpus
//! laid out so every feature's filter verdict is known, and a scripted
//! generator whose samples contain or omit each feature's word. Used by the
//! test suites and by `sae-sensitivity fixture` for offline demos.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::SyntheticBackend;
use crate::generation::{ScriptRule, ScriptedReply, ScriptedTransport};
use crate::linalg::{dot_f64, Matrix};
use crate::prompt::SAMPLE_SEPARATOR;
use crate::sae::{SaeModel, Variant};
use crate::tokenizer::{Tokenizer, WhitespaceTokenizer};

pub const D_MODEL: usize = 256;
pub const BACKEND_SEED: u64 = 7;
pub const SEQ_LEN: usize = 32;
pub const N_DOCS: usize = 1200;
pub const CORPUS_SEED: u64 = 11;
/// Pre-activation margin every detector keeps on either side of zero.
pub const MIN_MARGIN: f64 = 0.2;

const LEXICAL_BIAS: f32 = -0.5;
const CONTEXT_BIAS: f32 = -1.5;

pub const FILLERS: &[&str] = &[
    "the", "a", "of", "and", "to", "in", "is", "was", "for", "on", "with", "as", "by", "at",
    "from", "that", "this", "it", "they", "we", "old", "new", "small", "large", "quiet", "bright",
    "early", "late", "long", "short", "green", "dark", "warm", "cold", "open", "closed", "near",
    "far", "river", "road", "house", "garden", "window", "table", "letter", "street", "market",
    "morning", "evening", "winter", "summer", "people", "friend", "teacher", "child", "story",
    "music", "paper", "stone", "water", "light", "sound", "voice", "field", "city", "village",
    "train", "bridge", "door", "wall", "room", "book", "song", "game", "walked", "found", "made",
    "saw", "kept", "left", "took", "gave", "said", "told", "came", "went", "knew", "felt", "held",
    "turned", "moved", "stood", "waited", "called", "slowly", "quickly", "again", "always",
    "never", "often", "there", "here", "then", "still", "only", "just", "very", "more", "less",
    "some", "many", "every", "each", "other", "same", "next", "last", "first", "second",
];

pub const FEATURE_WORDS: [&str; 20] = [
    "harbor", "violin", "glacier", "lantern", "orchard", "compass", "velvet", "thunder",
    "meadow", "copper", "falcon", "pepper", "marble", "canyon", "saffron", "juniper", "quartz",
    "obsidian", "tundra", "zephyr",
];

pub const CARRY_WORDS: [&str; 3] = ["whereas", "moreover", "meanwhile"];

/// How a feature's verdict is determined by the corpus layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    /// Fires on its word wherever it occurs; passes both filters.
    Lexical,
    /// Fires on its word, which occurs in fewer than 15 sequences.
    Rare { documents: usize },
    /// Fires on its word only after a carry word seen earlier in the
    /// sequence, placed outside the example window.
    Contextual { carry: usize },
    /// Like `Contextual`, but the carry word falls inside the window in
    /// most documents.
    MostlyNear { carry: usize },
    /// Word never appears in the corpus.
    Absent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSpec {
    pub id: u32,
    pub word: &'static str,
    pub kind: FeatureKind,
    /// Documents containing the word, for lexical features.
    pub doc_rate: f64,
}

impl FeatureSpec {
    pub fn carry(&self) -> Option<&'static str> {
        match self.kind {
            FeatureKind::Contextual { carry } | FeatureKind::MostlyNear { carry } => {
                Some(CARRY_WORDS[carry])
            }
            _ => None,
        }
    }

    /// Whether the feature fires somewhere in a whitespace-separated text.
    /// The independent membership oracle for the constructed encoder.
    pub fn fires_on(&self, text: &str) -> bool {
        let words: Vec<&str> = text.split_whitespace().collect();
        match self.carry() {
            None => words.contains(&self.word),
            Some(carry) => match words.iter().position(|w| *w == carry) {
                Some(c) => words[c + 1..].contains(&self.word),
                None => false,
            },
        }
    }
}

pub fn feature_specs() -> Vec<FeatureSpec> {
    (0..20u32)
        .map(|id| {
            let kind = match id {
                0..=13 => FeatureKind::Lexical,
                14 => FeatureKind::Rare { documents: 8 },
                15 => FeatureKind::Rare { documents: 14 },
                16 => FeatureKind::Contextual { carry: 0 },
                17 => FeatureKind::Contextual { carry: 1 },
                18 => FeatureKind::MostlyNear { carry: 2 },
                _ => FeatureKind::Absent,
            };
            FeatureSpec {
                id,
                word: FEATURE_WORDS[id as usize],
                kind,
                doc_rate: 0.03 + 0.012 * f64::from(id),
            }
        })
        .collect()
}

pub fn vocabulary() -> Vec<String> {
    let mut v: Vec<String> = vec!["<unk>".into(), "\\n".into()];
    v.extend(FILLERS.iter().map(|s| s.to_string()));
    v.extend(FEATURE_WORDS.iter().map(|s| s.to_string()));
    v.extend(CARRY_WORDS.iter().map(|s| s.to_string()));
    v
}

pub fn tokenizer() -> WhitespaceTokenizer {
    WhitespaceTokenizer::from_entries(vocabulary()).expect("fixture vocabulary is valid")
}

pub fn backend(tokenizer: &WhitespaceTokenizer) -> SyntheticBackend {
    SyntheticBackend::new(D_MODEL, BACKEND_SEED, tokenizer.id()).with_carry_tokens(carry_ids(tokenizer))
}

fn carry_ids(tokenizer: &WhitespaceTokenizer) -> Vec<u32> {
    CARRY_WORDS
        .iter()
        .map(|w| tokenizer.token_id(w).expect("carry word in vocabulary"))
        .collect()
}

fn add(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn normalized(v: &[f32]) -> Vec<f32> {
    let n = dot_f64(v, v).sqrt();
    v.iter().map(|x| (f64::from(*x) / n) as f32).collect()
}

/// Encoder rows, biases and unit decoder rows of the detector SAE.
fn detector_weights(tokenizer: &WhitespaceTokenizer, backend: &SyntheticBackend) -> (Matrix, Vec<f32>, Matrix) {
    let specs = feature_specs();
    let mut enc = Vec::new();
    let mut bias = Vec::new();
    let mut dec = Vec::new();
    for s in &specs {
        let e = backend.embedding(tokenizer.token_id(s.word).expect("feature word"));
        let row = match s.carry() {
            Some(c) => add(&e, &backend.carry_embedding(tokenizer.token_id(c).expect("carry"))),
            None => e,
        };
        bias.push(if s.carry().is_some() { CONTEXT_BIAS } else { LEXICAL_BIAS });
        dec.push(normalized(&row));
        enc.push(row);
    }
    (
        Matrix::from_rows(&enc).expect("equal rows"),
        bias,
        Matrix::from_rows(&dec).expect("equal rows"),
    )
}

/// ReLU detector SAE: `max(0, w·x + b)`.
pub fn relu_sae(tokenizer: &WhitespaceTokenizer, backend: &SyntheticBackend) -> SaeModel {
    let (w_enc, b_enc, w_dec) = detector_weights(tokenizer, backend);
    SaeModel::relu(w_enc, b_enc, w_dec, vec![0.0; D_MODEL]).with_l0_label("lexical")
}

/// JumpReLU form of the same detectors: no bias, threshold `-b`.
pub fn jumprelu_sae(tokenizer: &WhitespaceTokenizer, backend: &SyntheticBackend) -> SaeModel {
    let (w_enc, b_enc, w_dec) = detector_weights(tokenizer, backend);
    let theta: Vec<f32> = b_enc.iter().map(|b| -b).collect();
    SaeModel::relu(w_enc, vec![0.0; b_enc.len()], w_dec, vec![0.0; D_MODEL])
        .with_variant(Variant::Jumprelu)
        .with_theta(theta)
        .with_l0_label("lexical")
}

/// Smallest distance of any detector pre-activation from zero, over every
/// vocabulary token alone and combined with each single carry vector (the
/// corpus never holds two carry words in one document). A positive
/// value of at least [`MIN_MARGIN`] means the membership oracle is exact.
pub fn detector_margin(tokenizer: &WhitespaceTokenizer, backend: &SyntheticBackend) -> f64 {
    let specs = feature_specs();
    let (w_enc, b_enc, _) = detector_weights(tokenizer, backend);
    let carries: Vec<(u32, Vec<f32>)> = carry_ids(tokenizer)
        .into_iter()
        .map(|id| (id, backend.carry_embedding(id)))
        .collect();
    let mut margin = f64::INFINITY;
    for token in 0..tokenizer.vocab_size() as u32 {
        let e = backend.embedding(token);
        for mask in std::iter::once(0).chain((0..carries.len()).map(|k| 1u32 << k)) {
            let mut x = e.clone();
            let mut present = Vec::new();
            for (k, (id, c)) in carries.iter().enumerate() {
                if mask & (1 << k) != 0 {
                    x = add(&x, c);
                    present.push(*id);
                }
            }
            for s in &specs {
                let word = tokenizer.token_id(s.word).expect("feature word");
                let should_fire = token == word
                    && s.carry()
                        .is_none_or(|c| present.contains(&tokenizer.token_id(c).expect("carry")));
                let z = dot_f64(&x, w_enc.row(s.id as usize)) + f64::from(b_enc[s.id as usize]);
                let signed = if should_fire { z } else { -z };
                margin = margin.min(signed);
            }
        }
    }
    margin
}

fn filler(rng: &mut ChaCha8Rng) -> &'static str {
    FILLERS.choose(rng).expect("fillers")
}

/// One document per line, each exactly [`SEQ_LEN`] words.
pub fn corpus_text() -> String {
    let specs = feature_specs();
    let mut rng = ChaCha8Rng::seed_from_u64(CORPUS_SEED);
    let mut docs: Vec<Vec<&'static str>> = (0..N_DOCS)
        .map(|_| (0..SEQ_LEN).map(|_| filler(&mut rng)).collect())
        .collect();
    // Contextual features own disjoint blocks of documents so carries never mix.
    let mut next_special = 0;
    let mut special_docs = |n: usize| {
        let r = next_special..next_special + n;
        next_special += n;
        r
    };
    for s in &specs {
        match s.kind {
            FeatureKind::Contextual { carry } => {
                for d in special_docs(40) {
                    let c = rng.random_range(0..5);
                    let t = rng.random_range(c + 15..SEQ_LEN);
                    docs[d][c] = CARRY_WORDS[carry];
                    docs[d][t] = s.word;
                }
            }
            FeatureKind::MostlyNear { carry } => {
                for (i, d) in special_docs(40).enumerate() {
                    let (c, t) = if i % 10 == 9 {
                        let c = rng.random_range(0..5);
                        (c, rng.random_range(c + 15..SEQ_LEN))
                    } else {
                        let t = rng.random_range(4..SEQ_LEN);
                        (t - rng.random_range(1..4), t)
                    };
                    docs[d][c] = CARRY_WORDS[carry];
                    docs[d][t] = s.word;
                }
            }
            _ => {}
        }
    }
    let plain = next_special;
    for s in &specs {
        match s.kind {
            FeatureKind::Lexical => {
                for doc in docs.iter_mut().skip(plain) {
                    if rng.random_bool(s.doc_rate) {
                        let p = rng.random_range(0..SEQ_LEN);
                        doc[p] = s.word;
                    }
                }
            }
            FeatureKind::Rare { documents } => {
                let picks = rand::seq::index::sample(&mut rng, N_DOCS - plain, documents);
                for d in picks {
                    let p = rng.random_range(0..SEQ_LEN);
                    docs[plain + d][p] = s.word;
                }
            }
            _ => {}
        }
    }
    let mut out = String::new();
    for d in docs {
        out.push_str(&d.join(" "));
        out.push('\n');
    }
    out
}

/// A generated sample: filler words with the feature word (or a decoy)
/// marked at `position`.
fn sample_text(rng: &mut ChaCha8Rng, word: &str, position: usize, len: usize, hit: bool) -> String {
    let mut words: Vec<String> = (0..len).map(|_| filler(rng).to_owned()).collect();
    let target = if hit { word.to_owned() } else { filler(rng).to_owned() };
    words[position] = format!("{{{{{target}}}}}");
    words.join(" ")
}

/// Number of samples per feature that omit the feature's word.
pub fn misses_for(feature_id: u32) -> usize {
    (feature_id % 4) as usize
}

/// Scripted replies: 11 samples per feature, `misses_for(id)` of which
/// place a decoy word in the marker instead of the feature word. Feature 5
/// answers with only three samples on the first attempt.
pub fn script() -> ScriptedTransport {
    let mut rng = ChaCha8Rng::seed_from_u64(CORPUS_SEED + 1);
    let mut transport = ScriptedTransport::default();
    for s in feature_specs() {
        let misses = misses_for(s.id);
        let samples: Vec<String> = (0..11)
            .map(|i| {
                let len = 8 + (i * 3) % 14;
                let position = (i * 5 + s.id as usize) % len;
                sample_text(&mut rng, s.word, position, len, i >= misses)
            })
            .collect();
        let full = ScriptedReply::Text(join_samples(&samples));
        let replies = if s.id == 5 {
            vec![ScriptedReply::Text(join_samples(&samples[..3])), full]
        } else {
            vec![full]
        };
        transport = transport.rule(format!("{}}}}}", s.word), replies);
    }
    transport
}

pub fn join_samples(samples: &[String]) -> String {
    samples.join(&format!("\n{SAMPLE_SEPARATOR}\n"))
}

/// Auto-interpretability scores: high for every feature but the odd
/// lexical ones above 8.
pub fn interp_scores() -> BTreeMap<u32, f64> {
    (0..20u32)
        .map(|id| (id, if id > 8 && id % 2 == 1 { 0.6 } else { 0.9 + f64::from(id % 5) * 0.02 }))
        .collect()
}

pub const CONFIG: &str = r#"out = "run"
seed = 1

[corpus]
path = "corpus.txt"
format = "lines"
token_budget = 38400
seq_len = 32

[tokenizer]
kind = "whitespace"
vocab = "vocab.txt"

[backend]
kind = "synthetic"
seed = 7
carry_tokens = ["whereas", "moreover", "meanwhile"]

[[sae]]
id = "lexical-relu"
path = "lexical_relu.safetensors"
interp_scores = "interp_scores.csv"

[[sae]]
id = "lexical-jumprelu"
path = "lexical_jumprelu.safetensors"

[sampling]
n_features = 20

[generation]
transport = "scripted"
script = "script.json"
max_in_flight = 4

[annotation]
n_items = 10
"#;

/// Writes the complete fixture into `dir` and returns the config path.
pub fn write_fixture(dir: &Path) -> std::io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let tok = tokenizer();
    let backend = backend(&tok);
    let mut vocab = vocabulary().join("\n");
    vocab.push('\n');
    fs::write(dir.join("vocab.txt"), vocab)?;
    fs::write(dir.join("corpus.txt"), corpus_text())?;
    let to_io = |e: crate::sae::SaeError| std::io::Error::other(e.to_string());
    relu_sae(&tok, &backend)
        .save(&dir.join("lexical_relu.safetensors"))
        .map_err(to_io)?;
    jumprelu_sae(&tok, &backend)
        .save(&dir.join("lexical_jumprelu.safetensors"))
        .map_err(to_io)?;
    let script = serde_json::to_string_pretty(&script()).expect("script serializes");
    fs::write(dir.join("script.json"), script + "\n")?;
    let mut scores = String::from("feature_id,score\n");
    for (id, s) in interp_scores() {
        scores.push_str(&format!("{id},{s}\n"));
    }
    fs::write(dir.join("interp_scores.csv"), scores)?;
    let config = dir.join("config.toml");
    fs::write(&config, CONFIG)?;
    Ok(config)
}

/// Rules of `script()` keyed by feature word, for tests.
pub fn script_rules() -> BTreeMap<String, ScriptRule> {
    script()
        .rules
        .into_iter()
        .map(|r| (r.contains.trim_end_matches('}').to_owned(), r))
        .collect()
}
