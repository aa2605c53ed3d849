//! Nominatim text-search geocoding with an on-disk response cache and a
//! polite request rate limit.
//!
//! Responses are cached append-only so repeated evaluation runs replay
//! identical results without touching the service. Cache keys are
//! normalized (lowercased, whitespace-collapsed) queries; the outbound
//! request keeps the caller's original casing.

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::clock::Clock;
use crate::gateway::transport::{self, Method, Transport, TransportError, WireRequest};
use crate::geodesy::GeoPoint;

/// Per the public Nominatim usage policy.
pub const PUBLIC_ENDPOINT_HOST: &str = "nominatim.openstreetmap.org";
const PUBLIC_MIN_INTERVAL_MS: u64 = 1000;

fn default_limit() -> usize {
    3
}
fn default_timeout_s() -> u64 {
    30
}
fn default_max_retries() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OsmConfig {
    pub base_url: String,
    #[serde(default = "default_limit")]
    pub limit: usize,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_path: Option<PathBuf>,
    /// Outbound request budget. Absent means: 1 request per second when
    /// talking to the public endpoint, unlimited against a self-hosted
    /// instance. Zero disables the limiter explicitly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_limit_per_s: Option<f64>,
}

impl OsmConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        OsmConfig {
            base_url: base_url.into(),
            limit: default_limit(),
            timeout_s: default_timeout_s(),
            max_retries: default_max_retries(),
            cache_path: None,
            rate_limit_per_s: None,
        }
    }

    fn min_interval_ms(&self) -> Option<u64> {
        match self.rate_limit_per_s {
            Some(rate) if rate > 0.0 => Some((1000.0 / rate).ceil() as u64),
            Some(_) => None,
            None if self.base_url.contains(PUBLIC_ENDPOINT_HOST) => Some(PUBLIC_MIN_INTERVAL_MS),
            None => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum OsmError {
    #[error("query is empty after trimming")]
    EmptyQuery,
    #[error("country must not be empty")]
    EmptyCountry,
    #[error("geocoding service throttled the request (status 429) after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("geocoding request failed after {attempts} attempt(s): {source}")]
    Transport {
        attempts: u32,
        source: TransportError,
    },
    #[error("malformed geocoding response: {0}")]
    Malformed(String),
    #[error("cache file error: {0}")]
    Cache(String),
}

/// One geocoding result. `name` is the leading segment of the display
/// name; `address` keeps the full display string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Place {
    pub name: String,
    pub address: String,
    pub location: GeoPoint,
    pub importance: f64,
}

pub struct OsmClient {
    cfg: OsmConfig,
    transport: Arc<dyn Transport>,
    clock: Arc<dyn Clock>,
    cache: Mutex<HashMap<String, String>>,
    /// Also serializes outbound requests, so the interval between any two
    /// is honored process-wide.
    last_request_ms: Mutex<Option<u64>>,
    outbound_count: Mutex<u64>,
}

impl OsmClient {
    pub fn new(
        cfg: OsmConfig,
        transport: Arc<dyn Transport>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, OsmError> {
        url::Url::parse(&cfg.base_url)
            .map_err(|e| OsmError::Malformed(format!("bad base_url {}: {e}", cfg.base_url)))?;
        let cache = match &cfg.cache_path {
            Some(path) => load_cache(path)?,
            None => HashMap::new(),
        };
        Ok(OsmClient {
            cfg,
            transport,
            clock,
            cache: Mutex::new(cache),
            last_request_ms: Mutex::new(None),
            outbound_count: Mutex::new(0),
        })
    }

    pub fn config(&self) -> &OsmConfig {
        &self.cfg
    }

    /// Number of requests that actually went out (cache misses).
    pub fn outbound_requests(&self) -> u64 {
        *self.outbound_count.lock().unwrap()
    }

    /// Search for a free-text query, returning at most `limit` places in
    /// service order.
    pub fn search(&self, query: &str, limit: usize) -> Result<Vec<Place>, OsmError> {
        let trimmed = query.trim();
        if trimmed.is_empty() {
            return Err(OsmError::EmptyQuery);
        }
        let key = cache_key(trimmed, limit);
        if let Some(body) = self.cache.lock().unwrap().get(&key).cloned() {
            return parse_places(body.as_bytes(), limit);
        }

        let req = search_request(&self.cfg, trimmed, limit);
        let body = self.send_limited(&req)?;
        let places = parse_places(&body, limit)?;

        let body_text = String::from_utf8_lossy(&body).into_owned();
        self.cache.lock().unwrap().insert(key.clone(), body_text.clone());
        if let Some(path) = &self.cfg.cache_path {
            append_cache_line(path, &key, &body_text)?;
        }
        Ok(places)
    }

    /// Coordinates for "city, country" (or just the country when no city
    /// is given): the first search result, or `None` for no results.
    pub fn geocode_city(&self, country: &str, city: &str) -> Result<Option<GeoPoint>, OsmError> {
        if country.trim().is_empty() {
            return Err(OsmError::EmptyCountry);
        }
        let query = if city.trim().is_empty() {
            country.trim().to_string()
        } else {
            format!("{}, {}", city.trim(), country.trim())
        };
        let places = self.search(&query, 1)?;
        Ok(places.first().map(|p| p.location))
    }

    fn send_limited(&self, req: &WireRequest) -> Result<Vec<u8>, OsmError> {
        let mut last = self.last_request_ms.lock().unwrap();
        if let Some(interval) = self.cfg.min_interval_ms() {
            if let Some(prev) = *last {
                let now = self.clock.now_ms();
                let elapsed = now.saturating_sub(prev);
                if elapsed < interval {
                    self.clock.sleep_ms(interval - elapsed);
                }
            }
        }
        *last = Some(self.clock.now_ms());
        *self.outbound_count.lock().unwrap() += 1;

        transport::send_with_retries(
            self.transport.as_ref(),
            req,
            Duration::from_secs(self.cfg.timeout_s),
            self.cfg.max_retries,
        )
        .map_err(|(source, attempts)| match source {
            TransportError::Status { status: 429, .. } => OsmError::RateLimited { attempts },
            source => OsmError::Transport { attempts, source },
        })
    }
}

/// The GET request a search issues; exposed so tests can stage mock
/// fixtures for it.
pub fn search_request(cfg: &OsmConfig, query: &str, limit: usize) -> WireRequest {
    let mut url = url::Url::parse(cfg.base_url.trim_end_matches('/'))
        .unwrap_or_else(|_| url::Url::parse("http://invalid.local").unwrap());
    {
        let mut path = url.path().trim_end_matches('/').to_string();
        path.push_str("/search");
        url.set_path(&path);
    }
    url.query_pairs_mut()
        .append_pair("q", query)
        .append_pair("format", "json")
        .append_pair("limit", &limit.to_string());
    WireRequest {
        method: Method::Get,
        url: url.to_string(),
        body: None,
        bearer: None,
    }
}

pub fn cache_key(query: &str, limit: usize) -> String {
    let normalized = query
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    format!("{limit}|{normalized}")
}

fn parse_places(body: &[u8], limit: usize) -> Result<Vec<Place>, OsmError> {
    #[derive(Deserialize)]
    struct Raw {
        display_name: String,
        lat: serde_json::Value,
        lon: serde_json::Value,
        #[serde(default)]
        importance: f64,
    }

    let raw: Vec<Raw> = serde_json::from_slice(body).map_err(|e| OsmError::Malformed(e.to_string()))?;
    let mut places = Vec::new();
    for item in raw.into_iter().take(limit) {
        let lat = value_to_f64(&item.lat)
            .ok_or_else(|| OsmError::Malformed(format!("bad latitude {:?}", item.lat)))?;
        let lon = value_to_f64(&item.lon)
            .ok_or_else(|| OsmError::Malformed(format!("bad longitude {:?}", item.lon)))?;
        let location = GeoPoint::new(lat, lon).map_err(|e| OsmError::Malformed(e.to_string()))?;
        let name = item
            .display_name
            .split(',')
            .next()
            .unwrap_or(&item.display_name)
            .trim()
            .to_string();
        places.push(Place {
            name,
            address: item.display_name,
            location,
            importance: item.importance,
        });
    }
    Ok(places)
}

fn value_to_f64(value: &serde_json::Value) -> Option<f64> {
    match value {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.parse().ok(),
        _ => None,
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    response: String,
}

fn load_cache(path: &PathBuf) -> Result<HashMap<String, String>, OsmError> {
    let mut map = HashMap::new();
    let text = match std::fs::read_to_string(path) {
        Ok(text) => text,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(map),
        Err(e) => return Err(OsmError::Cache(e.to_string())),
    };
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: CacheLine = serde_json::from_str(line)
            .map_err(|e| OsmError::Cache(format!("line {}: {e}", idx + 1)))?;
        map.insert(entry.key, entry.response);
    }
    Ok(map)
}

fn append_cache_line(path: &PathBuf, key: &str, response: &str) -> Result<(), OsmError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| OsmError::Cache(e.to_string()))?;
    }
    let line = serde_json::to_string(&CacheLine {
        key: key.to_string(),
        response: response.to_string(),
    })
    .expect("cache line serializes");
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| OsmError::Cache(e.to_string()))?;
    writeln!(file, "{line}").map_err(|e| OsmError::Cache(e.to_string()))
}
