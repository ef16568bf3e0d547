//! Scoring backends.
//!
//! A backend turns a [`ScoreRequest`] (an item with its chunks in some order
//! and a candidate label set) into per-label log-probabilities. Three
//! implementations share the [`ScoreBackend`] trait:
//!
//! * [`SyntheticBackend`] evaluates first-order models.
//! * [`ReplayBackend`] looks responses up in a recorded score file.
//! * [`RemoteBackend`] calls an HTTP scoring endpoint.
//!
//! [`RecordingBackend`] wraps any of them and captures a score file.
//!
//! # Score file
//!
//! Line-delimited JSON. Line 1 is `{"header": {...}}` with `schema`,
//! `kind = "scores"`, `config_hash`, `seeds` and `backend`. Every further line
//! is one [`ScoreRecord`]:
//!
//! | field         | meaning                                                   |
//! |---------------|-----------------------------------------------------------|
//! | `item_id`     | item identifier                                           |
//! | `perm_index`  | 0 for the identity reference, `k` for the k-th draw        |
//! | `permutation` | 1-based chunk order actually presented                    |
//! | `question`    | question text                                             |
//! | `chunks`      | chunks in their original (unpermuted) order               |
//! | `labels`      | candidate labels in request order                         |
//! | `response`    | `{scores: [{label, logprob}], backend, latency_ms, smoothed}` |
//!
//! Records are sorted by `(item_id, perm_index, permutation)` and unique per
//! `(item_id, permutation)`, so files do not depend on completion order.
//!
//! # Remote wire protocol
//!
//! `POST <url>` with `Content-Type: application/json` and, when a token is
//! configured, `Authorization: Bearer <token>`. Body:
//!
//! ```json
//! {"item_id": "q1", "question": "...", "chunks": ["c2", "c1"],
//!  "labels": ["1", "0"], "permutation": [2, 1]}
//! ```
//!
//! `chunks` arrive already permuted. The endpoint answers
//! `{"logprobs": {"1": -0.29, "0": -1.38}}` with natural-log probabilities
//! for every requested label.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dist::{smooth_normalize, FiniteDist, DEFAULT_SMOOTHING};
use crate::error::{invalid, BackendError, Result};
use crate::permute::Permutation;
use crate::report::{read_jsonl, write_jsonl, RunHeader};
use crate::synth::{FirstOrderModel, ModelSpec};

pub const TOKEN_ENV: &str = "ORDERGATE_REMOTE_TOKEN";

/// One scoring call: an item presented under one chunk order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub item_id: String,
    pub perm_index: usize,
    pub question: String,
    /// Original order; [`ScoreRequest::presented_chunks`] applies the permutation.
    pub chunks: Vec<String>,
    pub labels: Vec<String>,
    pub permutation: Permutation,
}

impl ScoreRequest {
    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(invalid(format!("item {}: empty label set", self.item_id)));
        }
        if self.permutation.len() != self.chunks.len() {
            return Err(invalid(format!(
                "item {}: permutation over {} chunks, item has {}",
                self.item_id,
                self.permutation.len(),
                self.chunks.len()
            )));
        }
        Ok(())
    }

    pub fn presented_chunks(&self) -> Vec<String> {
        self.permutation.apply(&self.chunks).expect("validated length")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub scores: Vec<LabelScore>,
    pub backend: String,
    pub latency_ms: u64,
    /// Smoothing already applied; [`ScoreResponse::distribution`] will not
    /// smooth again.
    pub smoothed: bool,
}

impl ScoreResponse {
    /// Predictive distribution over the labels. Smooths exactly once.
    pub fn distribution(&self) -> Result<FiniteDist> {
        let labels: Vec<String> = self.scores.iter().map(|s| s.label.clone()).collect();
        let mut probs = Vec::with_capacity(self.scores.len());
        for s in &self.scores {
            if !s.logprob.is_finite() && s.logprob != f64::NEG_INFINITY {
                return Err(BackendError::NonFinite { label: s.label.clone() }.into());
            }
            probs.push(s.logprob.exp());
        }
        if self.smoothed {
            let total: f64 = probs.iter().sum();
            if total <= 0.0 {
                return Err(invalid("smoothed response carries no mass"));
            }
            FiniteDist::new(labels, probs.iter().map(|p| p / total).collect())
        } else {
            smooth_normalize(labels, &probs, DEFAULT_SMOOTHING)
        }
    }

    fn from_distribution(dist: &FiniteDist, backend: &str, latency_ms: u64) -> Self {
        ScoreResponse {
            scores: dist
                .labels()
                .iter()
                .zip(dist.masses())
                .map(|(l, m)| LabelScore {
                    label: l.clone(),
                    logprob: m.ln(),
                })
                .collect(),
            backend: backend.to_string(),
            latency_ms,
            smoothed: true,
        }
    }
}

pub trait ScoreBackend: Send + Sync {
    fn id(&self) -> String;
    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, BackendError>;
}

impl<B: ScoreBackend + ?Sized> ScoreBackend for &B {
    fn id(&self) -> String {
        (**self).id()
    }
    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        (**self).score(request)
    }
}

impl<B: ScoreBackend + ?Sized> ScoreBackend for Box<B> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        (**self).score(request)
    }
}

/// Scores items with first-order models. The label set must be `{"1", "0"}`;
/// the model's `q` is the mass on `"1"`.
#[derive(Debug, Clone, Default)]
pub struct SyntheticBackend {
    models: HashMap<String, FirstOrderModel>,
    fallback: Option<ModelSpec>,
}

impl SyntheticBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Items without an explicit model get one built from `spec` with their
    /// own chunk count; weights are drawn from a stream keyed by item id.
    pub fn with_fallback(spec: ModelSpec) -> Self {
        SyntheticBackend {
            models: HashMap::new(),
            fallback: Some(spec),
        }
    }

    pub fn insert(&mut self, item_id: impl Into<String>, model: FirstOrderModel) {
        self.models.insert(item_id.into(), model);
    }

    fn model_for(&self, req: &ScoreRequest) -> Result<FirstOrderModel, BackendError> {
        if let Some(m) = self.models.get(&req.item_id) {
            return Ok(m.clone());
        }
        let spec = self
            .fallback
            .as_ref()
            .ok_or_else(|| BackendError::Unsupported(format!("no model for item {:?}", req.item_id)))?;
        spec.build_for(req.chunks.len(), item_stream(&req.item_id))
            .map_err(|e| BackendError::Unsupported(e.to_string()))
    }
}

/// Stable 64-bit stream id for an item.
pub fn item_stream(item_id: &str) -> u64 {
    let d = Sha256::digest(item_id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl ScoreBackend for SyntheticBackend {
    fn id(&self) -> String {
        "synthetic".into()
    }

    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        let mut labels = req.labels.clone();
        labels.sort();
        if labels != ["0", "1"] {
            return Err(BackendError::Unsupported(format!(
                "synthetic backend scores label set {{\"0\", \"1\"}}, got {:?}",
                req.labels
            )));
        }
        let model = self.model_for(req)?;
        let (q, _) = model
            .predict(&req.permutation)
            .map_err(|e| BackendError::Unsupported(e.to_string()))?;
        let raw: Vec<f64> = req
            .labels
            .iter()
            .map(|l| if l == "1" { q.get() } else { 1.0 - q.get() })
            .collect();
        let dist = smooth_normalize(req.labels.clone(), &raw, DEFAULT_SMOOTHING)
            .map_err(|e| BackendError::Malformed(e.to_string()))?;
        Ok(ScoreResponse::from_distribution(&dist, "synthetic", 0))
    }
}

/// One line of a score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub item_id: String,
    pub perm_index: usize,
    pub permutation: Permutation,
    pub question: String,
    pub chunks: Vec<String>,
    pub labels: Vec<String>,
    pub response: ScoreResponse,
}

impl ScoreRecord {
    fn sort_key(&self) -> (&str, usize, &Permutation) {
        (&self.item_id, self.perm_index, &self.permutation)
    }
}

/// Recorded scores plus their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFile {
    pub header: RunHeader,
    pub records: Vec<ScoreRecord>,
}

impl ScoreFile {
    /// Canonicalize: sort, then keep the first record per `(item, permutation)`.
    pub fn new(header: RunHeader, mut records: Vec<ScoreRecord>) -> Self {
        records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        let mut seen = HashSet::new();
        records.retain(|r| seen.insert((r.item_id.clone(), r.permutation.clone())));
        ScoreFile { header, records }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.header, &self.records)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (header, records) = read_jsonl(path)?;
        let header = header.unwrap_or_else(|| RunHeader::new("scores", "", vec![]));
        Ok(ScoreFile::new(header, records))
    }

    /// Records grouped per item, in canonical order.
    pub fn by_item(&self) -> BTreeMap<&str, Vec<&ScoreRecord>> {
        let mut out: BTreeMap<&str, Vec<&ScoreRecord>> = BTreeMap::new();
        for r in &self.records {
            out.entry(&r.item_id).or_default().push(r);
        }
        out
    }
}

/// Exact lookup of recorded responses.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    source: String,
    table: HashMap<(String, Permutation), ScoreResponse>,
}

impl ReplayBackend {
    pub fn new(file: &ScoreFile) -> Self {
        let table = file
            .records
            .iter()
            .map(|r| ((r.item_id.clone(), r.permutation.clone()), r.response.clone()))
            .collect();
        ReplayBackend {
            source: file.header.backend.clone().unwrap_or_else(|| "unknown".into()),
            table,
        }
    }

    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self::new(&ScoreFile::read(path)?))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl ScoreBackend for ReplayBackend {
    fn id(&self) -> String {
        format!("replay:{}", self.source)
    }

    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        self.table
            .get(&(req.item_id.clone(), req.permutation.clone()))
            .cloned()
            .ok_or_else(|| BackendError::MissingRecord {
                item_id: req.item_id.clone(),
                permutation: req.permutation.one_based(),
            })
    }
}

/// Captures every successful request/response pair of the wrapped backend.
pub struct RecordingBackend<B> {
    inner: B,
    records: Mutex<Vec<ScoreRecord>>,
}

impl<B: ScoreBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend {
            inner,
            records: Mutex::new(Vec::new()),
        }
    }

    /// Canonical score file of everything recorded so far.
    pub fn score_file(&self, config_hash: &str, seeds: Vec<u64>) -> ScoreFile {
        let mut header = RunHeader::new("scores", config_hash, seeds);
        header.backend = Some(self.inner.id());
        let records = self.records.lock().expect("recorder poisoned").clone();
        ScoreFile::new(header, records)
    }

    pub fn into_inner(self) -> B {
        self.inner
    }
}

impl<B: ScoreBackend> ScoreBackend for RecordingBackend<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        let resp = self.inner.score(req)?;
        self.records.lock().expect("recorder poisoned").push(ScoreRecord {
            item_id: req.item_id.clone(),
            perm_index: req.perm_index,
            permutation: req.permutation.clone(),
            question: req.question.clone(),
            chunks: req.chunks.clone(),
            labels: req.labels.clone(),
            response: resp.clone(),
        });
        Ok(resp)
    }
}

/// Settings for [`RemoteBackend`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub url: String,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_ms: u64,
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            url: String::new(),
            token_env: TOKEN_ENV.into(),
            timeout_ms: 30_000,
            max_attempts: 3,
            backoff_base_ms: 200,
            backoff_cap_ms: 2_000,
            max_in_flight: 4,
        }
    }
}

/// Counting semaphore bounding concurrent remote calls.
struct InFlight {
    used: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut used = self.used.lock().expect("semaphore poisoned");
        while *used >= self.cap {
            used = self.freed.wait(used).expect("semaphore poisoned");
        }
        *used += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().expect("semaphore poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    item_id: &'a str,
    question: &'a str,
    chunks: Vec<String>,
    labels: &'a [String],
    permutation: Vec<usize>,
}

#[derive(Deserialize)]
struct WireResponse {
    logprobs: HashMap<String, Option<f64>>,
}

enum Attempt {
    Retry(String),
    Fatal(BackendError),
}

/// HTTP scoring endpoint client.
pub struct RemoteBackend {
    config: RemoteConfig,
    token: Option<String>,
    agent: ureq::Agent,
    in_flight: InFlight,
}

impl RemoteBackend {
    /// Reads the bearer token from `config.token_env` if set.
    pub fn new(config: RemoteConfig) -> Result<Self> {
        let token = std::env::var(&config.token_env).ok().filter(|t| !t.is_empty());
        Self::with_token(config, token)
    }

    pub fn with_token(config: RemoteConfig, token: Option<String>) -> Result<Self> {
        if config.url.is_empty() {
            return Err(invalid("remote backend needs a url"));
        }
        if config.max_attempts == 0 || config.max_in_flight == 0 {
            return Err(invalid("max_attempts and max_in_flight must be positive"));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let cap = config.max_in_flight;
        Ok(RemoteBackend {
            config,
            token,
            agent,
            in_flight: InFlight {
                used: Mutex::new(0),
                freed: Condvar::new(),
                cap,
            },
        })
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .config
            .backoff_base_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.config.backoff_cap_ms);
        Duration::from_millis(ms)
    }

    fn attempt(&self, body: &str, labels: &[String]) -> Result<Vec<LabelScore>, Attempt> {
        let mut req = self
            .agent
            .post(&self.config.url)
            .header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req.send(body).map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            return Err(Attempt::Fatal(BackendError::Transport {
                attempts: 1,
                message: format!("HTTP {status}: {}", text.chars().take(200).collect::<String>()),
            }));
        }
        parse_wire_response(&text, labels).map_err(Attempt::Fatal)
    }
}

fn parse_wire_response(text: &str, labels: &[String]) -> Result<Vec<LabelScore>, BackendError> {
    let wire: WireResponse =
        serde_json::from_str(text).map_err(|e| BackendError::Malformed(e.to_string()))?;
    labels
        .iter()
        .map(|l| {
            let v = wire
                .logprobs
                .get(l)
                .ok_or_else(|| BackendError::Malformed(format!("missing label {l:?}")))?;
            match v {
                Some(x) if x.is_finite() => Ok(LabelScore {
                    label: l.clone(),
                    logprob: *x,
                }),
                _ => Err(BackendError::NonFinite { label: l.clone() }),
            }
        })
        .collect()
}

impl ScoreBackend for RemoteBackend {
    fn id(&self) -> String {
        format!("remote:{}", self.config.url)
    }

    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        req.validate().map_err(|e| BackendError::Unsupported(e.to_string()))?;
        let body = serde_json::to_string(&WireRequest {
            item_id: &req.item_id,
            question: &req.question,
            chunks: req.presented_chunks(),
            labels: &req.labels,
            permutation: req.permutation.one_based(),
        })
        .map_err(|e| BackendError::Malformed(e.to_string()))?;

        let _slot = self.in_flight.acquire();
        let start = Instant::now();
        let mut last = String::new();
        for attempt in 0..self.config.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff(attempt - 1));
            }
            match self.attempt(&body, &req.labels) {
                Ok(scores) => {
                    let raw: Vec<f64> = scores.iter().map(|s| s.logprob.exp()).collect();
                    let dist = smooth_normalize(req.labels.clone(), &raw, DEFAULT_SMOOTHING)
                        .map_err(|e| BackendError::Malformed(e.to_string()))?;
                    let latency = start.elapsed().as_millis() as u64;
                    return Ok(ScoreResponse::from_distribution(&dist, &self.id(), latency));
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(BackendError::Transport {
            attempts: self.config.max_attempts,
            message: last,
        })
    }
}
