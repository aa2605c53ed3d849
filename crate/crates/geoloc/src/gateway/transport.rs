//! Wire transport: a real HTTP backend and a deterministic mock that
//! replays canned responses keyed by request digest.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Get,
    Post,
}

impl Method {
    fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
        }
    }
}

/// A fully-resolved outbound request. The bearer token is carried
/// separately and never enters the request digest, so fixture files are
/// independent of credentials.
#[derive(Debug, Clone)]
pub struct WireRequest {
    pub method: Method,
    pub url: String,
    pub body: Option<serde_json::Value>,
    pub bearer: Option<String>,
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("transport I/O failure: {0}")]
    Io(String),
    #[error("server returned status {status}: {body_snippet}")]
    Status { status: u16, body_snippet: String },
    #[error("no fixture for request digest {digest} ({url})")]
    MissingFixture { digest: String, url: String },
}

impl TransportError {
    /// Timeouts, connection failures, and throttling or server-side
    /// statuses are worth retrying; client errors and missing fixtures
    /// are not.
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Timeout | TransportError::Io(_) => true,
            TransportError::Status { status, .. } => {
                *status == 408 || *status == 429 || (500..600).contains(status)
            }
            TransportError::MissingFixture { .. } => false,
        }
    }
}

/// Executes one request and returns the response body. Implementations
/// must be shareable across worker threads.
pub trait Transport: Send + Sync {
    fn execute(&self, req: &WireRequest, timeout: Duration) -> Result<Vec<u8>, TransportError>;
}

/// Run a request with up to `max_retries` retries on retryable failures,
/// doubling the backoff each round. The error side carries the attempt
/// count for context.
pub fn send_with_retries(
    transport: &dyn Transport,
    req: &WireRequest,
    timeout: Duration,
    max_retries: u32,
) -> Result<Vec<u8>, (TransportError, u32)> {
    const BASE_BACKOFF_MS: u64 = 50;
    let attempts_allowed = max_retries + 1;
    let mut attempt = 0;
    loop {
        attempt += 1;
        match transport.execute(req, timeout) {
            Ok(body) => return Ok(body),
            Err(err) if err.is_retryable() && attempt < attempts_allowed => {
                let backoff = BASE_BACKOFF_MS << (attempt - 1).min(6);
                log::warn!("request to {} failed (attempt {attempt}): {err}; retrying in {backoff} ms", req.url);
                std::thread::sleep(Duration::from_millis(backoff));
            }
            Err(err) => return Err((err, attempt)),
        }
    }
}

/// JSON re-serialized with object keys sorted at every depth, so the same
/// logical body always produces the same bytes.
pub fn canonical_json(value: &serde_json::Value) -> String {
    fn sort(value: &serde_json::Value) -> serde_json::Value {
        match value {
            serde_json::Value::Object(map) => {
                let sorted: BTreeMap<&String, serde_json::Value> =
                    map.iter().map(|(k, v)| (k, sort(v))).collect();
                serde_json::to_value(sorted).unwrap()
            }
            serde_json::Value::Array(items) => {
                serde_json::Value::Array(items.iter().map(sort).collect())
            }
            other => other.clone(),
        }
    }
    serde_json::to_string(&sort(value)).unwrap()
}

/// Stable hex digest identifying a request: method, URL, and canonical
/// body.
pub fn request_digest(req: &WireRequest) -> String {
    let mut hasher = Sha256::new();
    hasher.update(req.method.as_str());
    hasher.update(b"\n");
    hasher.update(&req.url);
    hasher.update(b"\n");
    if let Some(body) = &req.body {
        hasher.update(canonical_json(body));
    }
    hex::encode(hasher.finalize())
}

// ============================================================================
// HTTP
// ============================================================================

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new() -> Self {
        HttpTransport {
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl Transport for HttpTransport {
    fn execute(&self, req: &WireRequest, timeout: Duration) -> Result<Vec<u8>, TransportError> {
        let mut builder = match req.method {
            Method::Get => self.client.get(&req.url),
            Method::Post => self.client.post(&req.url),
        };
        builder = builder.timeout(timeout);
        if let Some(token) = &req.bearer {
            builder = builder.bearer_auth(token);
        }
        if let Some(body) = &req.body {
            builder = builder.json(body);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Io(e.to_string())
            }
        })?;
        let status = response.status();
        let bytes = response
            .bytes()
            .map_err(|e| TransportError::Io(e.to_string()))?;
        if !status.is_success() {
            return Err(TransportError::Status {
                status: status.as_u16(),
                body_snippet: String::from_utf8_lossy(&bytes[..bytes.len().min(200)]).into_owned(),
            });
        }
        Ok(bytes.to_vec())
    }
}

// ============================================================================
// Mock
// ============================================================================

/// Rough service classification of a request, derived from its URL path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CallKind {
    Chat,
    Embed,
    Ground,
    Ocr,
    OsmSearch,
    Other,
}

pub fn classify_url(url: &str) -> CallKind {
    let path = url.split('?').next().unwrap_or(url);
    if path.ends_with("/v1/chat/completions") {
        CallKind::Chat
    } else if path.ends_with("/v1/embeddings") {
        CallKind::Embed
    } else if path.ends_with("/ground") {
        CallKind::Ground
    } else if path.ends_with("/ocr") {
        CallKind::Ocr
    } else if path.ends_with("/search") {
        CallKind::OsmSearch
    } else {
        CallKind::Other
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CallRecord {
    pub kind: CallKind,
    pub digest: String,
    pub url: String,
}

/// Fixture-replay transport. Each request hashes to a digest; the
/// response is the contents of `<dir>/<digest>.json`. A request with no
/// staged fixture is a hard error so tests cannot silently drift. An
/// optional failure script per digest yields error statuses before the
/// fixture is served, which exercises retry paths.
pub struct MockTransport {
    dir: PathBuf,
    log: Mutex<Vec<CallRecord>>,
    script: Mutex<HashMap<String, VecDeque<u16>>>,
}

impl MockTransport {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        MockTransport {
            dir: dir.into(),
            log: Mutex::new(Vec::new()),
            script: Mutex::new(HashMap::new()),
        }
    }

    pub fn fixtures_dir(&self) -> &Path {
        &self.dir
    }

    pub fn fixture_path(&self, req: &WireRequest) -> PathBuf {
        self.dir.join(format!("{}.json", request_digest(req)))
    }

    /// Write the canned response for a request. Test setup builds the
    /// same requests the client will, via the public request builders,
    /// so digests match by construction.
    pub fn stage(&self, req: &WireRequest, response: &[u8]) -> std::io::Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        std::fs::write(self.fixture_path(req), response)
    }

    pub fn stage_json(
        &self,
        req: &WireRequest,
        response: &serde_json::Value,
    ) -> std::io::Result<()> {
        self.stage(req, serde_json::to_string(response).unwrap().as_bytes())
    }

    /// Queue error statuses to be served (in order) before the fixture.
    pub fn script_failures(&self, req: &WireRequest, statuses: &[u16]) {
        self.script
            .lock()
            .unwrap()
            .entry(request_digest(req))
            .or_default()
            .extend(statuses);
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.log.lock().unwrap().clone()
    }

    pub fn counts_by_kind(&self) -> BTreeMap<CallKind, usize> {
        let mut counts = BTreeMap::new();
        for call in self.log.lock().unwrap().iter() {
            *counts.entry(call.kind).or_insert(0) += 1;
        }
        counts
    }

    pub fn clear_log(&self) {
        self.log.lock().unwrap().clear();
    }
}

impl Transport for MockTransport {
    fn execute(&self, req: &WireRequest, _timeout: Duration) -> Result<Vec<u8>, TransportError> {
        let digest = request_digest(req);
        self.log.lock().unwrap().push(CallRecord {
            kind: classify_url(&req.url),
            digest: digest.clone(),
            url: req.url.clone(),
        });

        if let Some(queue) = self.script.lock().unwrap().get_mut(&digest) {
            if let Some(status) = queue.pop_front() {
                return Err(TransportError::Status {
                    status,
                    body_snippet: "scripted failure".into(),
                });
            }
        }

        let path = self.dir.join(format!("{digest}.json"));
        match std::fs::read(&path) {
            Ok(bytes) => Ok(bytes),
            Err(_) => Err(TransportError::MissingFixture {
                digest,
                url: req.url.clone(),
            }),
        }
    }
}
