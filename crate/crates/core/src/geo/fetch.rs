//! Cached, rate-limited execution of Overpass queries.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::overpass::{build_overpass_query, parse_overpass_response, OverpassError};
use super::{bbox_from_center, GeoError, GeoPoint, GscQueryConfig, PoiEntity};

/// Environment variable that overrides the configured endpoint.
pub const ENDPOINT_ENV: &str = "GEOAT_OVERPASS_ENDPOINT";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{0}")]
pub struct TransportError(pub String);

/// Blocking HTTP POST of a query body.
pub trait Transport: Send + Sync {
    fn post(&self, url: &str, body: &str, timeout: Duration) -> Result<HttpResponse, TransportError>;
}

#[derive(Debug, Error)]
pub enum FetchError {
    #[error(transparent)]
    Config(#[from] GeoError),
    #[error("network error after {attempts} attempts: {message}")]
    Network { attempts: u32, message: String },
    #[error("rate limited by endpoint (HTTP {status}) after {attempts} attempts")]
    RateLimited { status: u16, attempts: u32 },
    #[error("cannot parse Overpass body from {}: {source}", path.as_ref().map_or("<network>".into(), |p| p.display().to_string()))]
    Parse { path: Option<PathBuf>, source: OverpassError },
    #[error("cache i/o at {path}: {source}")]
    Cache { path: PathBuf, source: std::io::Error },
}

#[derive(Serialize)]
struct CacheMeta<'a> {
    lat: f64,
    lon: f64,
    side_m: f64,
    feature_keys: &'a [String],
    endpoint: &'a str,
    query: &'a str,
}

/// Hex SHA-256 over the request parameters that determine the response.
pub fn cache_key(p: GeoPoint, side_m: f64, keys: &[String], endpoint: &str) -> String {
    let canonical = format!(
        "lat={:.7}|lon={:.7}|side_m={}|keys={}|endpoint={}",
        p.lat(),
        p.lon(),
        side_m,
        keys.join(","),
        endpoint
    );
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Writes through a temporary sibling then renames into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

/// Fetches POIs for coordinates through a content-addressed cache. A single instance
/// serializes dispatch to the endpoint; share it across threads to respect the rate limit.
pub struct PoiFetcher<T: Transport> {
    cfg: GscQueryConfig,
    endpoint: String,
    transport: T,
    last_request: Mutex<Option<Instant>>,
}

impl<T: Transport> PoiFetcher<T> {
    /// The endpoint is taken from [`ENDPOINT_ENV`] when set.
    pub fn new(cfg: GscQueryConfig, transport: T) -> Result<Self, FetchError> {
        cfg.validate()?;
        let endpoint =
            std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty()).unwrap_or_else(|| cfg.endpoint.clone());
        Ok(Self { cfg, endpoint, transport, last_request: Mutex::new(None) })
    }

    pub fn config(&self) -> &GscQueryConfig {
        &self.cfg
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn cache_paths(&self, p: GeoPoint) -> (PathBuf, PathBuf) {
        let key = cache_key(p, self.cfg.side_m, &self.cfg.feature_keys, &self.endpoint);
        (self.cfg.cache_dir.join(format!("{key}.json")), self.cfg.cache_dir.join(format!("{key}.meta")))
    }

    pub fn fetch_pois(&self, p: GeoPoint) -> Result<Vec<PoiEntity>, FetchError> {
        let (body_path, meta_path) = self.cache_paths(p);
        if !self.cfg.force_refetch && body_path.exists() {
            let body =
                std::fs::read(&body_path).map_err(|source| FetchError::Cache { path: body_path.clone(), source })?;
            return parse_overpass_response(&body, &self.cfg.feature_keys)
                .map_err(|source| FetchError::Parse { path: Some(body_path), source });
        }
        let bbox = bbox_from_center(p, self.cfg.side_m)?;
        let query = build_overpass_query(&bbox, &self.cfg.feature_keys);
        let body = self.request(&query)?;
        let meta = CacheMeta {
            lat: p.lat(),
            lon: p.lon(),
            side_m: self.cfg.side_m,
            feature_keys: &self.cfg.feature_keys,
            endpoint: &self.endpoint,
            query: &query,
        };
        let meta_json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
        write_atomic(&body_path, &body).map_err(|source| FetchError::Cache { path: body_path.clone(), source })?;
        write_atomic(&meta_path, &meta_json).map_err(|source| FetchError::Cache { path: meta_path, source })?;
        parse_overpass_response(&body, &self.cfg.feature_keys)
            .map_err(|source| FetchError::Parse { path: Some(body_path), source })
    }

    fn wait_for_slot(&self) {
        let mut last = self.last_request.lock().unwrap_or_else(|e| e.into_inner());
        let interval = Duration::from_secs_f64(self.cfg.min_request_interval_s);
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < interval {
                std::thread::sleep(interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    fn request(&self, query: &str) -> Result<Vec<u8>, FetchError> {
        let timeout = Duration::from_secs_f64(self.cfg.timeout_s);
        let attempts = self.cfg.max_retries + 1;
        let mut last_status = None;
        let mut last_message = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.cfg.backoff_base_s * f64::from(1u32 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_secs_f64(delay));
            }
            self.wait_for_slot();
            match self.transport.post(&self.endpoint, query, timeout) {
                Ok(resp) if resp.status == 200 => return Ok(resp.body),
                Ok(resp) => {
                    last_status = Some(resp.status);
                    last_message = format!("HTTP {}", resp.status);
                }
                Err(e) => {
                    last_status = None;
                    last_message = e.0;
                }
            }
        }
        match last_status {
            Some(status @ (429 | 504)) => Err(FetchError::RateLimited { status, attempts }),
            _ => Err(FetchError::Network { attempts, message: last_message }),
        }
    }
}

/// `ureq`-backed transport.
#[cfg(feature = "net")]
#[derive(Debug, Default, Clone)]
pub struct HttpTransport;

#[cfg(feature = "net")]
impl Transport for HttpTransport {
    fn post(&self, url: &str, body: &str, timeout: Duration) -> Result<HttpResponse, TransportError> {
        let agent: ureq::Agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into();
        let mut resp = agent
            .post(url)
            .header("Content-Type", "application/x-www-form-urlencoded")
            .send_form([("data", body)])
            .map_err(|e| TransportError(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_vec().map_err(|e| TransportError(e.to_string()))?;
        Ok(HttpResponse { status, body })
    }
}
