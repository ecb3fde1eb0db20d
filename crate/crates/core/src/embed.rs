//! Token, node and pooled-input embeddings behind one provider interface.
//!
//! Three backends share the [`EmbeddingProvider`] trait:
//!
//! * [`SyntheticHashProvider`] derives vectors from a hash of the string and
//!   a global seed. No model is involved, which keeps tests deterministic.
//! * [`FileTableProvider`] reads vectors exported offline from any encoder.
//! * [`RemoteProvider`] posts to an embeddings endpoint over HTTP.
//!
//! ## Synthetic hash procedure
//!
//! For a string `s`, seed `g` and dimension `D`:
//!
//! ```text
//! key  = splitmix64(fnv1a64(utf8(s)) XOR splitmix64(g))
//! x_i  = splitmix64(key + (i + 1) * 0x9E3779B97F4A7C15)      (wrapping, i = 0..D)
//! v_i  = 2 * (x_i >> 11) / 2^53 - 1                          (in [-1, 1))
//! ```
//!
//! where `fnv1a64` is 64-bit FNV-1a (offset `0xcbf29ce484222325`, prime
//! `0x100000001b3`) and `splitmix64(z)` is Vigna's finalizer applied to
//! `z + 0x9E3779B97F4A7C15`.

use std::collections::HashMap;
use std::fs;
use std::ops::Deref;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::tokenize;
use crate::llm::{Executor, HttpRequest, Limiter, LlmError, RetryPolicy, SystemClock, Transport};

pub const ENV_EMBED_URL: &str = "LMX_EMBED_URL";
pub const ENV_API_KEY: &str = "LMX_API_KEY";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("no embedding for `{0}`")]
    Lookup(String),
    #[error("embedding table {path}: {message}")]
    Table { path: String, message: String },
    #[error("expected dimension {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("empty token list")]
    Empty,
    #[error("invalid provider configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Transport(#[from] LlmError),
}

/// Dense real vector with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(pub Vec<f64>);

impl Deref for EmbeddingVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for EmbeddingVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Pooled representation of a (question, choice) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmRepresentation(pub EmbeddingVector);

impl Deref for LmRepresentation {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    Mean,
    FirstToken,
}

impl std::str::FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Self::Mean),
            "first-token" | "first" => Ok(Self::FirstToken),
            other => Err(format!("unknown pooling `{other}`")),
        }
    }
}

pub fn pool(vectors: &[EmbeddingVector], pooling: Pooling) -> Result<EmbeddingVector, EmbedError> {
    let first = vectors.first().ok_or(EmbedError::Empty)?;
    match pooling {
        Pooling::FirstToken => Ok(first.clone()),
        Pooling::Mean => {
            let mut acc = vec![0.0; first.len()];
            for v in vectors {
                if v.len() != acc.len() {
                    return Err(EmbedError::Dimension {
                        expected: acc.len(),
                        actual: v.len(),
                    });
                }
                crate::nn::add_assign(&mut acc, v);
            }
            let n = vectors.len() as f64;
            Ok(EmbeddingVector(acc.into_iter().map(|x| x / n).collect()))
        }
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    fn pooling(&self) -> Pooling;

    /// One vector per token.
    fn embed_tokens(&self, tokens: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError>;

    /// A concept label is embedded as a single atomic string.
    fn embed_node(&self, label: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut v = self.embed_tokens(&[label.to_string()])?;
        Ok(v.pop().expect("one vector per token"))
    }

    /// Pools token vectors of `question` followed by `choice`.
    fn lm_representation(&self, question: &str, choice: &str) -> Result<LmRepresentation, EmbedError> {
        let mut tokens = tokenize(question);
        tokens.extend(tokenize(choice));
        let vectors = self.embed_tokens(&tokens)?;
        Ok(LmRepresentation(pool(&vectors, self.pooling())?))
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash-seeded vectors in `[-1, 1)`; see the module docs for the procedure.
#[derive(Debug, Clone)]
pub struct SyntheticHashProvider {
    dim: usize,
    seed: u64,
    pooling: Pooling,
}

impl SyntheticHashProvider {
    pub fn new(dim: usize, seed: u64, pooling: Pooling) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::Config("dimension must be > 0".into()));
        }
        Ok(Self { dim, seed, pooling })
    }

    pub fn vector(&self, s: &str) -> EmbeddingVector {
        let key = splitmix64(fnv1a64(s.as_bytes()) ^ splitmix64(self.seed));
        (0..self.dim as u64)
            .map(|i| {
                let x = splitmix64(key.wrapping_add((i + 1).wrapping_mul(GOLDEN_GAMMA)));
                2.0 * ((x >> 11) as f64 / (1u64 << 53) as f64) - 1.0
            })
            .collect::<Vec<_>>()
            .into()
    }
}

impl EmbeddingProvider for SyntheticHashProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn pooling(&self) -> Pooling {
        self.pooling
    }

    fn embed_tokens(&self, tokens: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if tokens.is_empty() {
            return Err(EmbedError::Empty);
        }
        Ok(tokens.iter().map(|t| self.vector(t)).collect())
    }
}

/// Lookup table loaded from `dim=<D> count=<N>` + `label<TAB>v1,...,vD` records.
#[derive(Debug, Clone)]
pub struct FileTableProvider {
    dim: usize,
    pooling: Pooling,
    table: HashMap<String, EmbeddingVector>,
}

impl FileTableProvider {
    pub fn load(path: &Path, pooling: Pooling) -> Result<Self, EmbedError> {
        let text = fs::read_to_string(path).map_err(|e| EmbedError::Table {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text, pooling).map_err(|message| EmbedError::Table {
            path: path.display().to_string(),
            message,
        })
    }

    pub fn parse(text: &str, pooling: Pooling) -> Result<Self, String> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or("missing header line")?;
        let mut dim = None;
        let mut count = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("dim", v)) => dim = v.parse::<usize>().ok(),
                Some(("count", v)) => count = v.parse::<usize>().ok(),
                _ => return Err(format!("line 1: unexpected header field `{field}`")),
            }
        }
        let (dim, count) = match (dim, count) {
            (Some(d), Some(c)) if d > 0 => (d, c),
            _ => return Err("line 1: header must be `dim=<D> count=<N>` with D > 0".into()),
        };
        let mut table = HashMap::with_capacity(count);
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (label, values) = line
                .split_once('\t')
                .ok_or_else(|| format!("line {}: missing tab separator", i + 1))?;
            let values: Vec<f64> = values
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| format!("line {}: {e}", i + 1))?;
            if values.len() != dim {
                return Err(format!(
                    "line {}: expected {dim} values, found {}",
                    i + 1,
                    values.len()
                ));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(format!("line {}: non-finite value", i + 1));
            }
            table.insert(label.to_string(), EmbeddingVector(values));
        }
        if table.len() != count {
            return Err(format!("header declares {count} records, found {}", table.len()));
        }
        Ok(Self {
            dim,
            pooling,
            table,
        })
    }
}

impl EmbeddingProvider for FileTableProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn pooling(&self) -> Pooling {
        self.pooling
    }

    fn embed_tokens(&self, tokens: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if tokens.is_empty() {
            return Err(EmbedError::Empty);
        }
        tokens
            .iter()
            .map(|t| {
                self.table
                    .get(t)
                    .cloned()
                    .ok_or_else(|| EmbedError::Lookup(t.clone()))
            })
            .collect()
    }
}

#[derive(Debug, Serialize)]
struct EmbedRequestBody<'a> {
    input: &'a [String],
    model: &'a str,
}

#[derive(Debug, Deserialize)]
struct EmbedResponseBody {
    data: Vec<EmbedDatum>,
}

#[derive(Debug, Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
}

/// HTTP embeddings backend (`{"input": [...], "model": ...}`).
pub struct RemoteProvider {
    endpoint: String,
    api_key: Option<String>,
    model: String,
    dim: usize,
    pooling: Pooling,
    timeout: Duration,
    executor: Executor,
}

impl RemoteProvider {
    pub fn new(
        endpoint: String,
        api_key: Option<String>,
        model: String,
        dim: usize,
        pooling: Pooling,
        transport: Arc<dyn Transport>,
        max_in_flight: usize,
    ) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::Config("dimension must be > 0".into()));
        }
        if endpoint.is_empty() {
            return Err(EmbedError::Config(format!("remote backend requires {ENV_EMBED_URL}")));
        }
        Ok(Self {
            endpoint,
            api_key,
            model,
            dim,
            pooling,
            timeout: Duration::from_secs(30),
            executor: Executor::new(
                transport,
                Arc::new(SystemClock),
                RetryPolicy::default(),
                Limiter::new(max_in_flight, None),
                0xe3bed,
            ),
        })
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn pooling(&self) -> Pooling {
        self.pooling
    }

    fn embed_tokens(&self, tokens: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if tokens.is_empty() {
            return Err(EmbedError::Empty);
        }
        let body = serde_json::to_string(&EmbedRequestBody {
            input: tokens,
            model: &self.model,
        })
        .expect("request serializes");
        let mut headers = Vec::new();
        if let Some(key) = &self.api_key {
            headers.push(("authorization".to_string(), format!("Bearer {key}")));
        }
        let (resp, _) = self.executor.execute(&HttpRequest {
            url: self.endpoint.clone(),
            headers,
            body,
            timeout: self.timeout,
        })?;
        let parsed: EmbedResponseBody = serde_json::from_str(&resp.body)
            .map_err(|e| LlmError::Protocol(e.to_string()))?;
        if parsed.data.len() != tokens.len() {
            return Err(LlmError::Protocol(format!(
                "expected {} embeddings, got {}",
                tokens.len(),
                parsed.data.len()
            ))
            .into());
        }
        parsed
            .data
            .into_iter()
            .map(|d| {
                if d.embedding.len() != self.dim {
                    Err(EmbedError::Dimension {
                        expected: self.dim,
                        actual: d.embedding.len(),
                    })
                } else {
                    Ok(EmbeddingVector(d.embedding))
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    FileTable,
    SyntheticHash,
    RemoteHttp,
}

impl std::str::FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "file-table" | "file" => Ok(Self::FileTable),
            "synthetic-hash" | "synthetic" => Ok(Self::SyntheticHash),
            "remote-http" | "remote" => Ok(Self::RemoteHttp),
            other => Err(format!("unknown embedding backend `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderConfig {
    pub backend: Backend,
    pub dim: usize,
    pub pooling: Pooling,
    pub seed: u64,
    pub table: Option<std::path::PathBuf>,
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
    pub model: String,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            backend: Backend::SyntheticHash,
            dim: 64,
            pooling: Pooling::Mean,
            seed: 0,
            table: None,
            endpoint: None,
            api_key: None,
            model: "text-embedding".into(),
        }
    }
}

impl ProviderConfig {
    pub fn with_env(mut self) -> Self {
        if let Ok(url) = std::env::var(ENV_EMBED_URL) {
            self.endpoint.get_or_insert(url);
        }
        if let Ok(key) = std::env::var(ENV_API_KEY) {
            self.api_key.get_or_insert(key);
        }
        self
    }

    pub fn build(&self) -> Result<Arc<dyn EmbeddingProvider>, EmbedError> {
        if self.dim == 0 {
            return Err(EmbedError::Config("dimension must be > 0".into()));
        }
        Ok(match self.backend {
            Backend::SyntheticHash => {
                Arc::new(SyntheticHashProvider::new(self.dim, self.seed, self.pooling)?)
            }
            Backend::FileTable => {
                let path = self
                    .table
                    .as_ref()
                    .ok_or_else(|| EmbedError::Config("file-table backend requires a table path".into()))?;
                let p = FileTableProvider::load(path, self.pooling)?;
                if p.dim() != self.dim {
                    return Err(EmbedError::Dimension {
                        expected: self.dim,
                        actual: p.dim(),
                    });
                }
                Arc::new(p)
            }
            Backend::RemoteHttp => {
                let endpoint = self
                    .endpoint
                    .clone()
                    .ok_or_else(|| EmbedError::Config(format!("remote backend requires {ENV_EMBED_URL}")))?;
                let transport = Arc::new(crate::llm::ReqwestTransport::new()?);
                Arc::new(RemoteProvider::new(
                    endpoint,
                    self.api_key.clone(),
                    self.model.clone(),
                    self.dim,
                    self.pooling,
                    transport,
                    4,
                )?)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(t: &[&str]) -> Vec<String> {
        t.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn synthetic_is_deterministic_and_bounded() {
        let p = SyntheticHashProvider::new(16, 3, Pooling::Mean).unwrap();
        let v = p.embed_tokens(&toks(&["war", "war"])).unwrap();
        assert_eq!(v[0], v[1]);
        assert!(v[0].iter().all(|x| (-1.0..=1.0).contains(x)));
        let other_seed = SyntheticHashProvider::new(16, 4, Pooling::Mean).unwrap();
        assert_ne!(v[0], other_seed.vector("war"));
    }

    #[test]
    fn node_and_token_embeddings_agree() {
        let p = SyntheticHashProvider::new(8, 7, Pooling::Mean).unwrap();
        assert_eq!(
            p.embed_node("reading").unwrap(),
            p.embed_tokens(&toks(&["reading"])).unwrap()[0]
        );
        assert_eq!(p.embed_node("quiet_chattering_mind").unwrap().len(), 8);
    }

    #[test]
    fn pooling_rules() {
        let a = EmbeddingVector(vec![0.0, 2.0]);
        let b = EmbeddingVector(vec![2.0, 0.0]);
        assert_eq!(pool(&[a.clone(), b.clone()], Pooling::Mean).unwrap().0, vec![1.0, 1.0]);
        assert_eq!(pool(&[a.clone(), a.clone()], Pooling::Mean).unwrap(), a);
        assert_eq!(pool(&[b.clone(), a], Pooling::FirstToken).unwrap(), b);
        assert!(matches!(pool(&[], Pooling::Mean), Err(EmbedError::Empty)));
    }

    #[test]
    fn file_table_lookup_and_errors() {
        let text = "dim=3 count=2\nreading\t0.5,-0.25,1e-3\nwar\t1,2,3\n";
        let p = FileTableProvider::parse(text, Pooling::Mean).unwrap();
        assert_eq!(p.embed_node("reading").unwrap().0, vec![0.5, -0.25, 1e-3]);
        assert!(matches!(p.embed_node("missing"), Err(EmbedError::Lookup(_))));
        assert!(FileTableProvider::parse("dim=3 count=1\nx\t1,2\n", Pooling::Mean).is_err());
        assert!(FileTableProvider::parse("dim=2 count=2\nx\t1,2\n", Pooling::Mean).is_err());
        assert!(FileTableProvider::parse("nonsense\n", Pooling::Mean).is_err());
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(SyntheticHashProvider::new(0, 0, Pooling::Mean).is_err());
    }
}
