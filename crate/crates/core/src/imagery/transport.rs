//! HTTP GET abstraction with a live client and an on-disk replay archive.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("network error: {0}")]
    Network(String),
    #[error("server error: HTTP {0}")]
    Server(u16),
    #[error("no recorded response for {0}")]
    NotRecorded(String),
    #[error("replay archive error: {0}")]
    Archive(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, TransportError::Network(_) | TransportError::Server(_))
    }
}

pub trait Transport: Send + Sync {
    fn get(&self, url: &str) -> Result<HttpResponse, TransportError>;
}

/// Live transport over `reqwest`'s blocking client.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        Ok(HttpTransport { client })
    }
}

impl Transport for HttpTransport {
    fn get(&self, url: &str) -> Result<HttpResponse, TransportError> {
        let resp = self
            .client
            .get(url)
            .send()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .bytes()
            .map_err(|e| TransportError::Network(e.to_string()))?
            .to_vec();
        Ok(HttpResponse { status, body })
    }
}

/// Replay key: hex SHA-256 of the URL with its `key=` parameter removed, so
/// archives are independent of the API key used to record them.
pub fn replay_key(url: &str) -> String {
    hex::encode(Sha256::digest(redact_key(url).as_bytes()))
}

/// Drops the `key` query parameter.
pub fn redact_key(url: &str) -> String {
    let Some((base, query)) = url.split_once('?') else {
        return url.to_string();
    };
    let kept: Vec<&str> = query.split('&').filter(|p| !p.starts_with("key=")).collect();
    format!("{base}?{}", kept.join("&"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayMeta {
    pub url: String,
    pub status: u16,
}

/// Answers requests from `<dir>/<replay_key>.meta.json` + `<dir>/<replay_key>.body`.
pub struct ReplayTransport {
    dir: PathBuf,
}

impl ReplayTransport {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReplayTransport { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Records a response into an archive directory.
    pub fn record(dir: &Path, url: &str, status: u16, body: &[u8]) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        let key = replay_key(url);
        let meta = ReplayMeta {
            url: redact_key(url),
            status,
        };
        fs::write(
            dir.join(format!("{key}.meta.json")),
            serde_json::to_vec_pretty(&meta).expect("meta serializes"),
        )?;
        fs::write(dir.join(format!("{key}.body")), body)
    }
}

impl Transport for ReplayTransport {
    fn get(&self, url: &str) -> Result<HttpResponse, TransportError> {
        let key = replay_key(url);
        let meta_path = self.dir.join(format!("{key}.meta.json"));
        let meta_bytes = match fs::read(&meta_path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(TransportError::NotRecorded(redact_key(url)))
            }
            Err(e) => return Err(TransportError::Archive(e.to_string())),
        };
        let meta: ReplayMeta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| TransportError::Archive(format!("{}: {e}", meta_path.display())))?;
        let body = match fs::read(self.dir.join(format!("{key}.body"))) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(TransportError::Archive(e.to_string())),
        };
        Ok(HttpResponse {
            status: meta.status,
            body,
        })
    }
}
