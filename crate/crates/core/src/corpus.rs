//! Corpus loading and deterministic sampling of fixed-length scan sequences.
//!
//! Two input formats are supported:
//!
//! * UTF-8 plain text, one document per line ([`CorpusFormat::Lines`]) or per
//!   blank-line separated block ([`CorpusFormat::Blocks`]).
//! * Pre-tokenized binary ([`CorpusFormat::Tokenized`]), all integers
//!   little-endian:
//!
//! ```text
//! offset  size        field
//! 0       8           magic  b"SAETOK\0\x01"
//! 8       4           n_docs (u32)
//! 12      4 * n_docs  document lengths in tokens (u32 each)
//! ...     4 * total   token ids (u32 each), documents back to back
//! ```
//!
//! The file must end exactly after the last token id.

use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{Tokenizer, TokenizerError};

pub const TOKENIZED_MAGIC: &[u8; 8] = b"SAETOK\0\x01";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("invalid sampling parameters: {0}")]
    InvalidParameters(String),
    #[error("invalid token sequence: {0}")]
    InvalidSequence(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    /// Sniff the binary magic, otherwise plain text one document per line.
    Auto,
    Lines,
    Blocks,
    Tokenized,
}

/// A tokenized span of a source document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub texts: Vec<String>,
    pub source_id: String,
    /// Start position in the source document, in tokens.
    pub offset: usize,
    pub tokenizer_id: String,
}

impl TokenSequence {
    pub fn new(
        tokens: Vec<u32>,
        texts: Vec<String>,
        source_id: impl Into<String>,
        offset: usize,
        tokenizer_id: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        if tokens.is_empty() {
            return Err(CorpusError::InvalidSequence("sequence has no tokens"));
        }
        if tokens.len() != texts.len() {
            return Err(CorpusError::InvalidSequence(
                "token and text counts differ",
            ));
        }
        Ok(Self {
            tokens,
            texts,
            source_id: source_id.into(),
            offset,
            tokenizer_id: tokenizer_id.into(),
        })
    }

    /// Tokenizes `text` as one standalone sequence.
    pub fn from_text(
        tokenizer: &dyn Tokenizer,
        text: &str,
        source_id: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let toks = tokenizer.encode(text)?;
        let (tokens, texts) = toks.into_iter().map(|t| (t.id, t.text)).unzip();
        Self::new(tokens, texts, source_id, 0, tokenizer.id())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Stable identity used for keying results: `source_id@offset`.
    pub fn reference(&self) -> String {
        format!("{}@{}", self.source_id, self.offset)
    }

    pub fn text(&self) -> String {
        self.texts.concat()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub source_id: String,
    pub tokens: Vec<u32>,
    pub texts: Vec<String>,
}

/// An opened corpus. Read-only after load; iterate with [`Corpus::documents`].
#[derive(Clone, Debug)]
pub struct Corpus {
    documents: Vec<Document>,
    tokenizer_id: String,
}

impl Corpus {
    pub fn from_documents(documents: Vec<Document>, tokenizer_id: impl Into<String>) -> Self {
        Self {
            documents,
            tokenizer_id: tokenizer_id.into(),
        }
    }

    pub fn documents(&self) -> impl ExactSizeIterator<Item = &Document> {
        self.documents.iter()
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.documents.iter().map(|d| d.tokens.len()).sum()
    }

    pub fn tokenizer_id(&self) -> &str {
        &self.tokenizer_id
    }
}

/// Sequences drawn for activation scanning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSample {
    pub sequences: Vec<TokenSequence>,
    pub total_tokens: usize,
    pub seed: u64,
    pub seq_len: usize,
    pub token_budget: usize,
    pub tokenizer_id: String,
    /// Non-fatal problems, e.g. a corpus shorter than the budget.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl CorpusSample {
    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

pub fn load_corpus(
    path: &Path,
    format: CorpusFormat,
    tokenizer: &dyn Tokenizer,
) -> Result<Corpus, CorpusError> {
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&bytes, format, tokenizer)
}

pub fn parse_corpus(
    bytes: &[u8],
    format: CorpusFormat,
    tokenizer: &dyn Tokenizer,
) -> Result<Corpus, CorpusError> {
    let format = match format {
        CorpusFormat::Auto if bytes.starts_with(TOKENIZED_MAGIC) => CorpusFormat::Tokenized,
        CorpusFormat::Auto => CorpusFormat::Lines,
        f => f,
    };
    let documents = match format {
        CorpusFormat::Tokenized => parse_tokenized(bytes, tokenizer)?,
        CorpusFormat::Lines | CorpusFormat::Blocks => {
            let text = std::str::from_utf8(bytes).map_err(|e| CorpusError::Format {
                offset: e.valid_up_to(),
                message: "invalid UTF-8 in text corpus".into(),
            })?;
            parse_text(text, format == CorpusFormat::Blocks, tokenizer)?
        }
        CorpusFormat::Auto => unreachable!(),
    };
    Ok(Corpus::from_documents(documents, tokenizer.id()))
}

fn parse_text(
    text: &str,
    blocks: bool,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<Document>, CorpusError> {
    let units: Vec<String> = if blocks {
        let mut out = Vec::new();
        let mut current: Vec<&str> = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                if !current.is_empty() {
                    out.push(current.join("\n"));
                    current.clear();
                }
            } else {
                current.push(line);
            }
        }
        if !current.is_empty() {
            out.push(current.join("\n"));
        }
        out
    } else {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_owned)
            .collect()
    };
    let kind = if blocks { "block" } else { "line" };
    units
        .iter()
        .enumerate()
        .map(|(i, unit)| {
            let toks = tokenizer.encode(unit)?;
            let (tokens, texts) = toks.into_iter().map(|t| (t.id, t.text)).unzip();
            Ok(Document {
                source_id: format!("{kind}:{i}"),
                tokens,
                texts,
            })
        })
        .filter(|d: &Result<Document, CorpusError>| d.as_ref().map_or(true, |d| !d.tokens.is_empty()))
        .collect()
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32, CorpusError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| CorpusError::Format {
            offset: bytes.len().min(offset),
            message: format!("file truncated while reading {what}"),
        })
}

fn parse_tokenized(bytes: &[u8], tokenizer: &dyn Tokenizer) -> Result<Vec<Document>, CorpusError> {
    if let Some(bad) = TOKENIZED_MAGIC
        .iter()
        .zip(bytes)
        .position(|(expected, actual)| expected != actual)
    {
        return Err(CorpusError::Format {
            offset: bad,
            message: "bad magic for tokenized corpus".into(),
        });
    }
    if bytes.len() < TOKENIZED_MAGIC.len() {
        return Err(CorpusError::Format {
            offset: bytes.len(),
            message: "file truncated inside magic".into(),
        });
    }
    let n_docs = read_u32(bytes, 8, "document count")? as usize;
    let mut lengths = Vec::with_capacity(n_docs.min(1 << 20));
    for i in 0..n_docs {
        lengths.push(read_u32(bytes, 12 + 4 * i, "document length index")? as usize);
    }
    let mut cursor = 12 + 4 * n_docs;
    let mut documents = Vec::with_capacity(n_docs);
    for (i, len) in lengths.into_iter().enumerate() {
        let mut tokens = Vec::with_capacity(len);
        for _ in 0..len {
            tokens.push(read_u32(bytes, cursor, "token ids")?);
            cursor += 4;
        }
        let texts = tokenizer.decode(&tokens)?;
        if !tokens.is_empty() {
            documents.push(Document {
                source_id: format!("doc:{i}"),
                tokens,
                texts,
            });
        }
    }
    if cursor != bytes.len() {
        return Err(CorpusError::Format {
            offset: cursor,
            message: "trailing bytes after last document".into(),
        });
    }
    Ok(documents)
}

/// Serializes token-id documents into the binary tokenized format.
pub fn encode_tokenized(documents: &[Vec<u32>]) -> Vec<u8> {
    let total: usize = documents.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(12 + 4 * (documents.len() + total));
    out.extend_from_slice(TOKENIZED_MAGIC);
    out.extend_from_slice(&(documents.len() as u32).to_le_bytes());
    for doc in documents {
        out.extend_from_slice(&(doc.len() as u32).to_le_bytes());
    }
    for id in documents.iter().flatten() {
        out.extend_from_slice(&id.to_le_bytes());
    }
    out
}

/// Draws `token_budget / seq_len` non-overlapping chunks, aligned to
/// `seq_len` boundaries inside each document, uniformly without replacement.
/// Document remainders shorter than `seq_len` are never emitted. Sequences
/// are returned in corpus order.
pub fn sample_sequences(
    corpus: &Corpus,
    token_budget: usize,
    seq_len: usize,
    seed: u64,
) -> Result<CorpusSample, CorpusError> {
    if seq_len == 0 || token_budget < seq_len {
        return Err(CorpusError::InvalidParameters(format!(
            "need token_budget >= seq_len >= 1, got budget {token_budget}, seq_len {seq_len}"
        )));
    }
    let wanted = token_budget / seq_len;
    let positions: Vec<(usize, usize)> = corpus
        .documents
        .iter()
        .enumerate()
        .flat_map(|(d, doc)| (0..doc.tokens.len() / seq_len).map(move |k| (d, k * seq_len)))
        .collect();

    let mut warnings = Vec::new();
    let chosen: Vec<usize> = if wanted >= positions.len() {
        if wanted > positions.len() {
            warnings.push(format!(
                "corpus holds {} aligned chunks of {seq_len} tokens, fewer than the {wanted} requested; sample is partial",
                positions.len()
            ));
        }
        (0..positions.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, positions.len(), wanted).into_vec();
        picked.sort_unstable();
        picked
    };

    let sequences = chosen
        .into_iter()
        .map(|i| {
            let (d, start) = positions[i];
            let doc = &corpus.documents[d];
            TokenSequence {
                tokens: doc.tokens[start..start + seq_len].to_vec(),
                texts: doc.texts[start..start + seq_len].to_vec(),
                source_id: doc.source_id.clone(),
                offset: start,
                tokenizer_id: corpus.tokenizer_id.clone(),
            }
        })
        .collect::<Vec<_>>();
    Ok(CorpusSample {
        total_tokens: sequences.len() * seq_len,
        sequences,
        seed,
        seq_len,
        token_budget,
        tokenizer_id: corpus.tokenizer_id.clone(),
        warnings,
    })
}
