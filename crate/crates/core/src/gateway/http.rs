use std::collections::HashMap;
use std::fs;
use std::time::Duration;

use super::protocol::{ClassifyRequest, ClassifyResponse, WireImage, CLASSIFY_PATH};
use super::{ClassifierBackend, GatewayError, ImageRef, ModelRole, RawScores};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Remote classifier speaking the `/v1/classify` protocol. Scene and building
/// models may live behind different base URLs.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    scene_url: String,
    building_url: String,
}

impl HttpBackend {
    pub fn new(
        scene_base: &str,
        building_base: &str,
        timeout: Duration,
        max_connections: usize,
    ) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .pool_max_idle_per_host(max_connections.max(1))
            .build()
            .map_err(|e| GatewayError::BackendUnavailable(e.to_string()))?;
        Ok(HttpBackend {
            client,
            scene_url: endpoint(scene_base),
            building_url: endpoint(building_base),
        })
    }
}

fn endpoint(base: &str) -> String {
    format!("{}{CLASSIFY_PATH}", base.trim_end_matches('/'))
}

impl ClassifierBackend for HttpBackend {
    fn classify_raw(&self, role: ModelRole, images: &[ImageRef]) -> Result<Vec<RawScores>, GatewayError> {
        let mut unreadable: HashMap<&str, String> = HashMap::new();
        let mut wire = Vec::with_capacity(images.len());
        for img in images {
            match fs::read(&img.path) {
                Ok(bytes) => wire.push(WireImage::encode(&img.id, &bytes)),
                Err(e) => {
                    unreadable.insert(img.id.as_str(), format!("unreadable image: {e}"));
                }
            }
        }
        let mut by_id: HashMap<String, RawScores> = HashMap::new();
        if !wire.is_empty() {
            let url = match role {
                ModelRole::Scene => &self.scene_url,
                ModelRole::Building => &self.building_url,
            };
            let request = ClassifyRequest { model: role, images: wire };
            let resp = self
                .client
                .post(url)
                .json(&request)
                .send()
                .map_err(|e| GatewayError::BackendUnavailable(e.to_string()))?;
            let status = resp.status();
            if status.is_server_error() {
                return Err(GatewayError::BackendUnavailable(format!("{url} answered HTTP {status}")));
            }
            if !status.is_success() {
                return Err(GatewayError::Protocol(format!("{url} answered HTTP {status}")));
            }
            let body: ClassifyResponse = resp
                .json()
                .map_err(|e| GatewayError::Protocol(format!("bad response body: {e}")))?;
            for r in body.results {
                if by_id.insert(r.id.clone(), Ok(r.probs)).is_some() {
                    by_id.insert(r.id.clone(), Err(format!("duplicate result for {}", r.id)));
                }
            }
        }
        Ok(images
            .iter()
            .map(|img| {
                if let Some(reason) = unreadable.get(img.id.as_str()) {
                    return Err(reason.clone());
                }
                by_id
                    .remove(&img.id)
                    .unwrap_or_else(|| Err("missing from backend response".to_string()))
            })
            .collect())
    }
}
