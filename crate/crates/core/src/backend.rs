//! Activation backends: providers of per-token model activations.

use std::collections::BTreeSet;
use std::time::Duration;

use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::tokenizer::{Token, Tokenizer, TokenizerError};

/// Environment variable holding the bearer token for remote backends.
pub const BACKEND_TOKEN_ENV: &str = "SAE_BACKEND_TOKEN";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend transport failed after {attempts} attempt(s) (retryable: {retryable}): {message}")]
    Transport {
        attempts: u32,
        retryable: bool,
        message: String,
    },
    #[error("backend configuration error: {0}")]
    Configuration(String),
    #[error("malformed backend response: {0}")]
    Protocol(String),
}

pub trait ActivationBackend: Send + Sync {
    fn name(&self) -> &str;
    fn d_model(&self) -> usize;
    fn tokenizer_id(&self) -> &str;

    /// Backends that may return different activations for the same input
    /// must report `false`; they are refused for scoring runs.
    fn is_deterministic(&self) -> bool {
        true
    }

    /// Returns a `tokens.len() x d_model` activation matrix.
    fn activations(&self, tokens: &[u32]) -> Result<Matrix, BackendError>;
}

/// Pseudo-random unit embedding per token id, independent of position.
///
/// Optional "carry" tokens add a second, context-dependent component: every
/// position strictly after an occurrence of a carry token receives that
/// token's carry vector. This gives long-range context effects whose ground
/// truth is known by construction. With no carry tokens the backend is fully
/// position independent.
#[derive(Clone, Debug)]
pub struct SyntheticBackend {
    d_model: usize,
    seed: u64,
    tokenizer_id: String,
    carry_tokens: BTreeSet<u32>,
}

const EMBED_SALT: u64 = 0x5EED_0000_0000_0001;
const CARRY_SALT: u64 = 0xCA44_0000_0000_0002;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl SyntheticBackend {
    pub fn new(d_model: usize, seed: u64, tokenizer_id: impl Into<String>) -> Self {
        assert!(d_model > 0, "d_model must be positive");
        Self {
            d_model,
            seed,
            tokenizer_id: tokenizer_id.into(),
            carry_tokens: BTreeSet::new(),
        }
    }

    pub fn with_carry_tokens(mut self, tokens: impl IntoIterator<Item = u32>) -> Self {
        self.carry_tokens.extend(tokens);
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn carry_tokens(&self) -> &BTreeSet<u32> {
        &self.carry_tokens
    }

    fn unit_vector(&self, token: u32, salt: u64) -> Vec<f32> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ salt ^ splitmix64(u64::from(token))));
        let raw: Vec<f64> = (0..self.d_model)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        raw.into_iter().map(|v| (v / norm) as f32).collect()
    }

    /// The unit embedding of `token`.
    pub fn embedding(&self, token: u32) -> Vec<f32> {
        self.unit_vector(token, EMBED_SALT)
    }

    /// The context vector contributed after an occurrence of carry `token`.
    pub fn carry_embedding(&self, token: u32) -> Vec<f32> {
        self.unit_vector(token, CARRY_SALT)
    }
}

impl ActivationBackend for SyntheticBackend {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn d_model(&self) -> usize {
        self.d_model
    }

    fn tokenizer_id(&self) -> &str {
        &self.tokenizer_id
    }

    fn activations(&self, tokens: &[u32]) -> Result<Matrix, BackendError> {
        let mut out = Matrix::zeros(tokens.len(), self.d_model);
        let mut carried: Vec<f32> = vec![0.0; self.d_model];
        let mut seen = BTreeSet::new();
        for (t, &tok) in tokens.iter().enumerate() {
            let emb = self.embedding(tok);
            for ((o, e), c) in out.row_mut(t).iter_mut().zip(&emb).zip(&carried) {
                *o = e + c;
            }
            if self.carry_tokens.contains(&tok) && seen.insert(tok) {
                for (c, v) in carried.iter_mut().zip(self.carry_embedding(tok)) {
                    *c += v;
                }
            }
        }
        Ok(out)
    }
}

/// Connection settings for the HTTP activation backend.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub url: String,
    pub d_model: usize,
    pub tokenizer_id: String,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub backoff_ms: u64,
}

fn default_attempts() -> u32 {
    3
}

fn default_timeout_secs() -> u64 {
    60
}

#[derive(Serialize)]
struct ActivationRequest<'a> {
    token_ids: &'a [u32],
}

/// Response body of `POST /activations`. `data` is base64 of the row-major
/// little-endian `f32` payload with shape `[T, d_model]`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ActivationResponse {
    pub tokenizer_id: String,
    pub shape: [usize; 2],
    pub data: String,
}

impl ActivationResponse {
    pub fn encode(tokenizer_id: &str, m: &Matrix) -> Self {
        let bytes: Vec<u8> = m.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            tokenizer_id: tokenizer_id.to_owned(),
            shape: [m.rows(), m.cols()],
            data: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Matrix, BackendError> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.data)
            .map_err(|e| BackendError::Protocol(format!("bad base64 payload: {e}")))?;
        if bytes.len() % 4 != 0 {
            return Err(BackendError::Protocol("payload length not a multiple of 4".into()));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let [rows, cols] = self.shape;
        Matrix::from_vec(rows, cols, values).ok_or_else(|| {
            BackendError::Protocol(format!("payload does not match shape {rows}x{cols}"))
        })
    }
}

/// Client for a remote model server exposing `POST /activations`, and
/// optionally `POST /tokenize` and `POST /decode` (see [`RemoteTokenizer`]).
pub struct RemoteBackend {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
    token: Option<String>,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Configuration(e.to_string()))?;
        Ok(Self {
            token: std::env::var(BACKEND_TOKEN_ENV).ok(),
            config,
            client,
        })
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(
        &self,
        route: &str,
        body: &B,
    ) -> Result<R, BackendError> {
        let url = format!("{}/{route}", self.config.url.trim_end_matches('/'));
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        let mut retryable = false;
        for attempt in 1..=attempts {
            let mut req = self.client.post(&url).json(body);
            if let Some(token) = &self.token {
                req = req.bearer_auth(token);
            }
            match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    return resp
                        .json::<R>()
                        .map_err(|e| BackendError::Protocol(e.to_string()));
                }
                Ok(resp) => {
                    let status = resp.status();
                    retryable = status.is_server_error() || status.as_u16() == 429;
                    last = format!("HTTP {status} from {url}");
                    if !retryable {
                        return Err(BackendError::Transport {
                            attempts: attempt,
                            retryable,
                            message: last,
                        });
                    }
                }
                Err(e) => {
                    retryable = true;
                    last = e.to_string();
                }
            }
            tracing::warn!(attempt, %url, error = %last, "activation backend request failed");
            if attempt < attempts && self.config.backoff_ms > 0 {
                std::thread::sleep(Duration::from_millis(self.config.backoff_ms << (attempt - 1)));
            }
        }
        Err(BackendError::Transport {
            attempts,
            retryable,
            message: last,
        })
    }
}

impl ActivationBackend for RemoteBackend {
    fn name(&self) -> &str {
        &self.config.url
    }

    fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn tokenizer_id(&self) -> &str {
        &self.config.tokenizer_id
    }

    fn activations(&self, tokens: &[u32]) -> Result<Matrix, BackendError> {
        let resp: ActivationResponse =
            self.post("activations", &ActivationRequest { token_ids: tokens })?;
        if resp.tokenizer_id != self.config.tokenizer_id {
            return Err(BackendError::Configuration(format!(
                "backend reports tokenizer {:?}, expected {:?}",
                resp.tokenizer_id, self.config.tokenizer_id
            )));
        }
        let m = resp.decode()?;
        if m.rows() != tokens.len() || m.cols() != self.config.d_model {
            return Err(BackendError::Protocol(format!(
                "expected {}x{} activations, got {}x{}",
                tokens.len(),
                self.config.d_model,
                m.rows(),
                m.cols()
            )));
        }
        Ok(m)
    }
}

#[derive(Serialize)]
struct TokenizeRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct TokenizeResponse {
    tokens: Vec<Token>,
}

#[derive(Serialize)]
struct DecodeRequest<'a> {
    token_ids: &'a [u32],
}

#[derive(Deserialize)]
struct DecodeResponse {
    texts: Vec<String>,
}

/// Tokenizer served by the remote backend, so token ids always agree with
/// the subject model.
///
/// `POST /tokenize {"text"}` returns `{"tokens": [{"id","text","start","end"}]}`;
/// `POST /decode {"token_ids"}` returns `{"texts": [...]}`.
pub struct RemoteTokenizer {
    backend: RemoteBackend,
}

impl RemoteTokenizer {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        Ok(Self {
            backend: RemoteBackend::new(config)?,
        })
    }
}

impl Tokenizer for RemoteTokenizer {
    fn id(&self) -> &str {
        &self.backend.config.tokenizer_id
    }

    fn encode(&self, text: &str) -> Result<Vec<Token>, TokenizerError> {
        self.backend
            .post::<_, TokenizeResponse>("tokenize", &TokenizeRequest { text })
            .map(|r| r.tokens)
            .map_err(|e| TokenizerError::Remote(e.to_string()))
    }

    fn decode(&self, ids: &[u32]) -> Result<Vec<String>, TokenizerError> {
        let r: DecodeResponse = self
            .backend
            .post("decode", &DecodeRequest { token_ids: ids })
            .map_err(|e| TokenizerError::Remote(e.to_string()))?;
        if r.texts.len() != ids.len() {
            return Err(TokenizerError::Remote("decode returned wrong token count".into()));
        }
        Ok(r.texts)
    }
}
