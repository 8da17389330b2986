//! Pluggable tokenizers.
//!
//! The [`WhitespaceTokenizer`] is driven by a vocabulary file with one token
//! string per line (token id = zero-based line number). The line `\n` (a
//! literal backslash followed by `n`) names the newline token, and `<unk>`,
//! when present, absorbs out-of-vocabulary words.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const NEWLINE_VOCAB_ENTRY: &str = "\\n";
pub const UNKNOWN_VOCAB_ENTRY: &str = "<unk>";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("failed to read vocabulary {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("duplicate vocabulary entry {entry:?} on line {line}")]
    DuplicateEntry { entry: String, line: usize },
    #[error("unknown token {0:?} and vocabulary has no <unk> entry")]
    UnknownToken(String),
    #[error("token id {0} is outside the vocabulary")]
    UnknownId(u32),
    #[error("remote tokenizer failed: {0}")]
    Remote(String),
}

/// One token of an encoded text, with its byte range in the source string.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: u32,
    pub text: String,
    pub start: usize,
    pub end: usize,
}

pub trait Tokenizer: Send + Sync {
    /// Identifier that activation backends must declare to accept ids from
    /// this tokenizer.
    fn id(&self) -> &str;

    fn encode(&self, text: &str) -> Result<Vec<Token>, TokenizerError>;

    /// Per-token display strings for a run of ids; concatenating them gives
    /// the decoded text.
    fn decode(&self, ids: &[u32]) -> Result<Vec<String>, TokenizerError>;
}

/// Splits on spaces and tabs; newlines are tokens of their own. A word
/// preceded by horizontal whitespace carries one leading space in its text,
/// the way byte-pair tokenizers attach spaces to the following word.
#[derive(Clone, Debug)]
pub struct WhitespaceTokenizer {
    id: String,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    newline: Option<u32>,
    unknown: Option<u32>,
}

impl WhitespaceTokenizer {
    pub fn from_vocab_file(path: &Path) -> Result<Self, TokenizerError> {
        let text = std::fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_entries(text.lines().map(str::to_owned).collect())
    }

    pub fn from_entries(entries: Vec<String>) -> Result<Self, TokenizerError> {
        if entries.is_empty() {
            return Err(TokenizerError::EmptyVocabulary);
        }
        let mut index = HashMap::with_capacity(entries.len());
        let mut hasher = Sha256::new();
        for (line, entry) in entries.iter().enumerate() {
            hasher.update(entry.as_bytes());
            hasher.update(b"\n");
            if index.insert(entry.clone(), line as u32).is_some() {
                return Err(TokenizerError::DuplicateEntry {
                    entry: entry.clone(),
                    line,
                });
            }
        }
        let digest = hex::encode(hasher.finalize());
        Ok(Self {
            id: format!("whitespace:{}", &digest[..16]),
            newline: index.get(NEWLINE_VOCAB_ENTRY).copied(),
            unknown: index.get(UNKNOWN_VOCAB_ENTRY).copied(),
            vocab: entries,
            index,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Id of a bare vocabulary string (no leading space), if present.
    pub fn token_id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn entry(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    fn lookup(&self, word: &str) -> Result<u32, TokenizerError> {
        self.index
            .get(word)
            .copied()
            .or(self.unknown)
            .ok_or_else(|| TokenizerError::UnknownToken(word.to_owned()))
    }
}

impl Tokenizer for WhitespaceTokenizer {
    fn id(&self) -> &str {
        &self.id
    }

    fn encode(&self, text: &str) -> Result<Vec<Token>, TokenizerError> {
        let mut tokens = Vec::new();
        let mut word_start: Option<usize> = None;
        // Byte offset of the horizontal whitespace char directly before the
        // current word, if any.
        let mut pending_space: Option<usize> = None;
        let flush = |start: usize, end: usize, space: Option<usize>, tokens: &mut Vec<Token>| {
            let word = &text[start..end];
            let id = self.lookup(word)?;
            let (text, start) = match space {
                Some(s) => (format!(" {word}"), s),
                None => (word.to_owned(), start),
            };
            tokens.push(Token { id, text, start, end });
            Ok::<_, TokenizerError>(())
        };

        for (pos, ch) in text.char_indices() {
            match ch {
                ' ' | '\t' | '\r' | '\n' => {
                    if let Some(start) = word_start.take() {
                        flush(start, pos, pending_space.take(), &mut tokens)?;
                    }
                    if ch == '\n' {
                        pending_space = None;
                        let id = match self.newline {
                            Some(id) => id,
                            None => self.lookup(NEWLINE_VOCAB_ENTRY)?,
                        };
                        tokens.push(Token {
                            id,
                            text: "\n".to_owned(),
                            start: pos,
                            end: pos + 1,
                        });
                    } else {
                        pending_space = Some(pos);
                    }
                }
                _ => {
                    if word_start.is_none() {
                        word_start = Some(pos);
                    }
                }
            }
        }
        if let Some(start) = word_start {
            flush(start, text.len(), pending_space, &mut tokens)?;
        }
        Ok(tokens)
    }

    fn decode(&self, ids: &[u32]) -> Result<Vec<String>, TokenizerError> {
        let mut out = Vec::with_capacity(ids.len());
        let mut after_newline = true;
        for &id in ids {
            let entry = self.entry(id).ok_or(TokenizerError::UnknownId(id))?;
            if Some(id) == self.newline {
                out.push("\n".to_owned());
                after_newline = true;
            } else if after_newline {
                out.push(entry.to_owned());
                after_newline = false;
            } else {
                out.push(format!(" {entry}"));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> WhitespaceTokenizer {
        WhitespaceTokenizer::from_entries(
            ["<unk>", "\\n", "the", "foo", "bar"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn encodes_words_with_leading_spaces() {
        let t = tok();
        let toks = t.encode("the foo\nbar baz").unwrap();
        let ids: Vec<u32> = toks.iter().map(|t| t.id).collect();
        assert_eq!(ids, vec![2, 3, 1, 4, 0]);
        let texts: Vec<&str> = toks.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, vec!["the", " foo", "\n", "bar", " baz"]);
        assert_eq!((toks[1].start, toks[1].end), (3, 7));
        assert_eq!((toks[4].start, toks[4].end), (11, 15));
    }

    #[test]
    fn decode_mirrors_encode_spacing() {
        let t = tok();
        let texts = t.decode(&[2, 3, 1, 4]).unwrap();
        assert_eq!(texts.concat(), "the foo\nbar");
        assert!(matches!(t.decode(&[99]), Err(TokenizerError::UnknownId(99))));
    }

    #[test]
    fn unknown_without_unk_entry_fails() {
        let t = WhitespaceTokenizer::from_entries(vec!["a".into()]).unwrap();
        assert!(matches!(t.encode("b"), Err(TokenizerError::UnknownToken(_))));
    }

    #[test]
    fn empty_and_whitespace_only_texts_have_no_tokens() {
        let t = tok();
        assert!(t.encode("").unwrap().is_empty());
        assert!(t.encode("  \t ").unwrap().is_empty());
    }

    #[test]
    fn id_depends_on_vocabulary() {
        let a = tok();
        let b = WhitespaceTokenizer::from_entries(vec!["x".into()]).unwrap();
        assert_ne!(a.id(), b.id());
        assert!(a.id().starts_with("whitespace:"));
    }
}
