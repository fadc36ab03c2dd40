//! Wire types for `POST /v1/classify`.
//!
//! Request: `{"model": "scene"|"building", "images": [{"id": .., "png_base64": ..}]}`
//! Response: `{"results": [{"id": .., "probs": {label: number}}]}`

use std::collections::BTreeMap;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::ModelRole;

pub const CLASSIFY_PATH: &str = "/v1/classify";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub model: ModelRole,
    pub images: Vec<WireImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireImage {
    pub id: String,
    pub png_base64: String,
}

impl WireImage {
    pub fn encode(id: impl Into<String>, png: &[u8]) -> Self {
        WireImage {
            id: id.into(),
            png_base64: base64::engine::general_purpose::STANDARD.encode(png),
        }
    }

    pub fn decode(&self) -> Result<Vec<u8>, base64::DecodeError> {
        base64::engine::general_purpose::STANDARD.decode(&self.png_base64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub results: Vec<WireResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResult {
    pub id: String,
    pub probs: BTreeMap<String, f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_keys_are_exact() {
        let req = ClassifyRequest {
            model: ModelRole::Scene,
            images: vec![WireImage::encode("img-1", b"\x89PNG")],
        };
        let v = serde_json::to_value(&req).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"model": "scene", "images": [{"id": "img-1", "png_base64": "iVBORw=="}]})
        );
        assert_eq!(req.images[0].decode().unwrap(), b"\x89PNG");
    }

    #[test]
    fn response_parses() {
        let r: ClassifyResponse =
            serde_json::from_str(r#"{"results":[{"id":"a","probs":{"house":0.75,"retail":0.25}}]}"#).unwrap();
        assert_eq!(r.results[0].probs["house"], 0.75);
    }
}
