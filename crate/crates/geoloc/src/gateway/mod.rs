//! Clients for the model services behind the pipeline: vision-language
//! chat, image embedding, open-vocabulary grounding, and OCR, plus the
//! local crop primitive. All network traffic goes through the
//! [`transport::Transport`] trait, so the same client code runs against
//! live HTTP services or the deterministic fixture mock.

pub mod clock;
pub mod transport;

use std::io::Cursor;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use image::GenericImageView;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use transport::{Method, Transport, TransportError, WireRequest};

fn default_timeout_s() -> u64 {
    60
}
fn default_max_retries() -> u32 {
    2
}
fn default_temperature() -> f64 {
    0.0
}
fn default_max_output() -> u32 {
    2048
}
fn default_concurrency() -> usize {
    4
}

/// Connection settings for one model service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    #[serde(default)]
    pub model: String,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_output")]
    pub max_output: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bearer_token: Option<String>,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model: model.into(),
            timeout_s: default_timeout_s(),
            max_retries: default_max_retries(),
            temperature: default_temperature(),
            max_output: default_max_output(),
            bearer_token: None,
            concurrency: default_concurrency(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.base_url.trim().is_empty() {
            return Err(GatewayError::BadConfig("base_url is empty".into()));
        }
        if self.timeout_s == 0 {
            return Err(GatewayError::BadConfig("timeout must be positive".into()));
        }
        if self.temperature < 0.0 || !self.temperature.is_finite() {
            return Err(GatewayError::BadConfig(format!(
                "temperature {} must be non-negative",
                self.temperature
            )));
        }
        if self.concurrency == 0 {
            return Err(GatewayError::BadConfig(
                "concurrency cap must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_s)
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("{op} against {endpoint} failed after {attempts} attempt(s): {source}")]
    Transport {
        endpoint: String,
        op: &'static str,
        attempts: u32,
        source: TransportError,
    },
    #[error("{op} against {endpoint} returned a malformed body: {detail}")]
    MalformedResponse {
        endpoint: String,
        op: &'static str,
        detail: String,
    },
    #[error("embedding dimension {got} does not match the expected {expected}")]
    EmbeddingDimension { expected: usize, got: usize },
    #[error("invalid detection from {endpoint}: {detail}")]
    InvalidDetection { endpoint: String, detail: String },
    #[error("prompt must not be empty")]
    EmptyPrompt,
    #[error("grounding needs at least one label")]
    NoLabels,
    #[error("image could not be decoded: {0}")]
    ImageDecode(String),
    #[error("image could not be encoded: {0}")]
    ImageEncode(String),
    #[error("crop box {0:?} has zero area")]
    DegenerateBox(BoundingBox),
    #[error("crop box {box_:?} exceeds the {width}x{height} image bounds")]
    BoxOutOfBounds {
        box_: BoundingBox,
        width: u32,
        height: u32,
    },
    #[error("bad gateway configuration: {0}")]
    BadConfig(String),
}

/// Pixel rectangle with exclusive lower-right corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = String;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        if v.iter().any(|c| !c.is_finite()) {
            return Err("box coordinate is not finite".into());
        }
        Ok(BoundingBox {
            x0: v[0],
            y0: v[1],
            x1: v[2],
            y1: v[3],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    #[serde(rename = "box")]
    pub box_: BoundingBox,
    #[serde(rename = "score")]
    pub confidence: f64,
}

// ============================================================================
// Request builders
// ============================================================================
// Pure functions from inputs to wire requests. Tests stage mock fixtures
// through these same builders, which guarantees digest agreement with the
// client.

pub fn encode_image_b64(image: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(image)
}

pub fn chat_request(cfg: &EndpointConfig, prompt: &str, images: &[Vec<u8>]) -> WireRequest {
    let mut content = vec![serde_json::json!({"type": "text", "text": prompt})];
    for image in images {
        content.push(serde_json::json!({
            "type": "image_url",
            "image_url": {"url": format!("data:image/png;base64,{}", encode_image_b64(image))}
        }));
    }
    WireRequest {
        method: Method::Post,
        url: format!("{}/v1/chat/completions", cfg.base_url.trim_end_matches('/')),
        body: Some(serde_json::json!({
            "model": cfg.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_output,
        })),
        bearer: cfg.bearer_token.clone(),
    }
}

pub fn embed_request(cfg: &EndpointConfig, image: &[u8]) -> WireRequest {
    WireRequest {
        method: Method::Post,
        url: format!("{}/v1/embeddings", cfg.base_url.trim_end_matches('/')),
        body: Some(serde_json::json!({
            "model": cfg.model,
            "input": [encode_image_b64(image)],
        })),
        bearer: cfg.bearer_token.clone(),
    }
}

pub fn ground_request(
    cfg: &EndpointConfig,
    image: &[u8],
    labels: &[String],
    box_threshold: f64,
    text_threshold: f64,
) -> WireRequest {
    WireRequest {
        method: Method::Post,
        url: format!("{}/ground", cfg.base_url.trim_end_matches('/')),
        body: Some(serde_json::json!({
            "image_b64": encode_image_b64(image),
            "labels": labels,
            "box_threshold": box_threshold,
            "text_threshold": text_threshold,
        })),
        bearer: cfg.bearer_token.clone(),
    }
}

pub fn ocr_request(cfg: &EndpointConfig, image: &[u8]) -> WireRequest {
    WireRequest {
        method: Method::Post,
        url: format!("{}/ocr", cfg.base_url.trim_end_matches('/')),
        body: Some(serde_json::json!({"image_b64": encode_image_b64(image)})),
        bearer: cfg.bearer_token.clone(),
    }
}

// ============================================================================
// Client
// ============================================================================

/// One model service endpoint plus its transport, retry policy, and
/// concurrency cap. Shareable across worker threads.
pub struct ServiceClient {
    cfg: EndpointConfig,
    transport: Arc<dyn Transport>,
    permits: Semaphore,
}

impl ServiceClient {
    pub fn new(cfg: EndpointConfig, transport: Arc<dyn Transport>) -> Self {
        let permits = Semaphore::new(cfg.concurrency.max(1));
        ServiceClient {
            cfg,
            transport,
            permits,
        }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    fn send(&self, op: &'static str, req: &WireRequest) -> Result<Vec<u8>, GatewayError> {
        let _permit = self.permits.acquire();
        transport::send_with_retries(
            self.transport.as_ref(),
            req,
            self.cfg.timeout(),
            self.cfg.max_retries,
        )
        .map_err(|(source, attempts)| GatewayError::Transport {
            endpoint: self.cfg.base_url.clone(),
            op,
            attempts,
            source,
        })
    }

    fn parse_body(&self, op: &'static str, body: &[u8]) -> Result<serde_json::Value, GatewayError> {
        serde_json::from_slice(body).map_err(|e| GatewayError::MalformedResponse {
            endpoint: self.cfg.base_url.clone(),
            op,
            detail: e.to_string(),
        })
    }

    fn malformed(&self, op: &'static str, detail: impl Into<String>) -> GatewayError {
        GatewayError::MalformedResponse {
            endpoint: self.cfg.base_url.clone(),
            op,
            detail: detail.into(),
        }
    }

    /// Send a prompt plus images to the chat service and return the
    /// completion text verbatim.
    pub fn chat_vision(&self, prompt: &str, images: &[Vec<u8>]) -> Result<String, GatewayError> {
        if prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let op = "chat";
        let req = chat_request(&self.cfg, prompt, images);
        let value = self.parse_body(op, &self.send(op, &req)?)?;
        value
            .pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| self.malformed(op, "missing choices[0].message.content"))
    }

    /// Embed one image. When `expected_dim` is given, a response of any
    /// other dimension is a configuration error.
    pub fn embed_image(
        &self,
        image: &[u8],
        expected_dim: Option<usize>,
    ) -> Result<Vec<f32>, GatewayError> {
        let op = "embed";
        let req = embed_request(&self.cfg, image);
        let value = self.parse_body(op, &self.send(op, &req)?)?;
        let raw = value
            .pointer("/data/0/embedding")
            .and_then(|v| v.as_array())
            .ok_or_else(|| self.malformed(op, "missing data[0].embedding"))?;
        let mut vector = Vec::with_capacity(raw.len());
        for item in raw {
            let n = item
                .as_f64()
                .ok_or_else(|| self.malformed(op, "embedding component is not a number"))?;
            vector.push(n as f32);
        }
        if let Some(expected) = expected_dim {
            if vector.len() != expected {
                return Err(GatewayError::EmbeddingDimension {
                    expected,
                    got: vector.len(),
                });
            }
        }
        Ok(vector)
    }

    /// Locate the given element labels in the image. Detections come back
    /// in service order, validated against the image bounds.
    pub fn ground(
        &self,
        image: &[u8],
        labels: &[String],
        box_threshold: f64,
        text_threshold: f64,
    ) -> Result<Vec<Detection>, GatewayError> {
        if labels.is_empty() {
            return Err(GatewayError::NoLabels);
        }
        let op = "ground";
        let (width, height) = image_dimensions(image)?;
        let req = ground_request(&self.cfg, image, labels, box_threshold, text_threshold);
        let value = self.parse_body(op, &self.send(op, &req)?)?;
        let raw = value
            .get("detections")
            .cloned()
            .ok_or_else(|| self.malformed(op, "missing detections array"))?;
        let detections: Vec<Detection> = serde_json::from_value(raw)
            .map_err(|e| self.malformed(op, format!("bad detection entry: {e}")))?;
        for det in &detections {
            validate_detection(det, width, height).map_err(|detail| {
                GatewayError::InvalidDetection {
                    endpoint: self.cfg.base_url.clone(),
                    detail,
                }
            })?;
        }
        Ok(detections)
    }

    /// Extract text from an image. The result is whitespace-trimmed and
    /// may be empty.
    pub fn ocr(&self, image: &[u8]) -> Result<String, GatewayError> {
        let op = "ocr";
        let req = ocr_request(&self.cfg, image);
        let value = self.parse_body(op, &self.send(op, &req)?)?;
        value
            .get("text")
            .and_then(|v| v.as_str())
            .map(|s| s.trim().to_string())
            .ok_or_else(|| self.malformed(op, "missing text field"))
    }
}

fn validate_detection(det: &Detection, width: u32, height: u32) -> Result<(), String> {
    let b = det.box_;
    if !(b.x0 < b.x1 && b.y0 < b.y1) {
        return Err(format!("box corners out of order: {b:?}"));
    }
    if b.x0 < 0.0 || b.y0 < 0.0 || b.x1 > width as f64 || b.y1 > height as f64 {
        return Err(format!("box {b:?} outside {width}x{height} image"));
    }
    if !(0.0..=1.0).contains(&det.confidence) {
        return Err(format!("confidence {} outside [0, 1]", det.confidence));
    }
    Ok(())
}

pub fn image_dimensions(image: &[u8]) -> Result<(u32, u32), GatewayError> {
    let img = image::load_from_memory(image).map_err(|e| GatewayError::ImageDecode(e.to_string()))?;
    Ok(img.dimensions())
}

/// Cut the box region out of the image and return it re-encoded as PNG.
/// Box coordinates are rounded to whole pixels.
pub fn crop(image: &[u8], box_: &BoundingBox) -> Result<Vec<u8>, GatewayError> {
    let img = image::load_from_memory(image).map_err(|e| GatewayError::ImageDecode(e.to_string()))?;
    let (width, height) = img.dimensions();

    let x0 = box_.x0.round();
    let y0 = box_.y0.round();
    let x1 = box_.x1.round();
    let y1 = box_.y1.round();
    if x0 < 0.0 || y0 < 0.0 || x1 > width as f64 || y1 > height as f64 {
        return Err(GatewayError::BoxOutOfBounds {
            box_: *box_,
            width,
            height,
        });
    }
    if x1 - x0 < 1.0 || y1 - y0 < 1.0 {
        return Err(GatewayError::DegenerateBox(*box_));
    }

    let cropped = img.crop_imm(x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32);
    encode_png(&cropped)
}

pub fn encode_png(img: &image::DynamicImage) -> Result<Vec<u8>, GatewayError> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| GatewayError::ImageEncode(e.to_string()))?;
    Ok(out.into_inner())
}

// ============================================================================
// Concurrency cap
// ============================================================================

struct Semaphore {
    state: Mutex<usize>,
    available: Condvar,
}

struct SemaphoreGuard<'a> {
    semaphore: &'a Semaphore,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            state: Mutex::new(permits),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.state.lock().unwrap();
        while *permits == 0 {
            permits = self.available.wait(permits).unwrap();
        }
        *permits -= 1;
        SemaphoreGuard { semaphore: self }
    }
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.semaphore.state.lock().unwrap();
        *permits += 1;
        self.semaphore.available.notify_one();
    }
}
