//! Uniform access to the scene-filter and building classifiers.
//!
//! Backends speak the `/v1/classify` JSON protocol (see [`protocol`]) or run
//! in-process as the deterministic [`StubBackend`]. Everything a backend
//! returns is validated here before it reaches the pipeline.

mod distribution;
mod http;
pub mod protocol;
mod stub;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::class::BuildingClass;

pub use distribution::{top1, ClassDistribution, DistributionError, SIMPLEX_TOLERANCE};
pub use http::{HttpBackend, DEFAULT_TIMEOUT as DEFAULT_CLASSIFY_TIMEOUT};
pub use stub::StubBackend;

/// Building-related scene categories. Images whose scene prediction falls in
/// this set are kept for building classification.
pub const SCENE_WHITELIST: [&str; 10] = [
    "apartment",
    "church",
    "house",
    "industrial area",
    "museum",
    "building facade",
    "embassy",
    "hospital",
    "parking garage",
    "hotel",
];

/// Catch-all scene label used by the stub.
pub const SCENE_OTHER: &str = "other";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Scene,
    Building,
}

impl ModelRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelRole::Scene => "scene",
            ModelRole::Building => "building",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("classifier backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("classifier protocol violation: {0}")]
    Protocol(String),
}

/// A single image that could not be turned into a valid distribution.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("image {image_id}: {reason}")]
pub struct InvalidDistribution {
    pub image_id: String,
    pub reason: String,
}

/// An image handed to a backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRef {
    pub id: String,
    pub path: PathBuf,
}

/// What a backend reports for one image before validation.
pub type RawScores = Result<BTreeMap<String, f64>, String>;

pub trait ClassifierBackend: Send + Sync {
    /// One entry per input image, in input order.
    fn classify_raw(&self, role: ModelRole, images: &[ImageRef]) -> Result<Vec<RawScores>, GatewayError>;
}

/// Validating front end over a backend.
pub struct Gateway {
    backend: Box<dyn ClassifierBackend>,
    building_labels: Vec<String>,
    batch_size: usize,
}

impl Gateway {
    pub fn new(backend: Box<dyn ClassifierBackend>) -> Self {
        Gateway {
            backend,
            building_labels: BuildingClass::labels(),
            batch_size: 32,
        }
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    /// Appends an extra label (a rejection class) after the eight building
    /// classes.
    pub fn with_rejection_label(mut self, label: Option<&str>) -> Self {
        self.building_labels = BuildingClass::labels();
        if let Some(l) = label {
            self.building_labels.push(l.to_string());
        }
        self
    }

    pub fn into_backend(self) -> Box<dyn ClassifierBackend> {
        self.backend
    }

    pub fn building_labels(&self) -> &[String] {
        &self.building_labels
    }

    /// Classifies images in batches. The outer error aborts the stage; inner
    /// errors mark single images as failed.
    pub fn classify_batch(
        &self,
        images: &[ImageRef],
        role: ModelRole,
    ) -> Result<Vec<Result<ClassDistribution, InvalidDistribution>>, GatewayError> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(self.batch_size) {
            let raw = self.backend.classify_raw(role, chunk)?;
            if raw.len() != chunk.len() {
                return Err(GatewayError::Protocol(format!(
                    "backend returned {} results for {} images",
                    raw.len(),
                    chunk.len()
                )));
            }
            for (img, scores) in chunk.iter().zip(raw) {
                out.push(self.validate(role, &img.id, scores));
            }
        }
        Ok(out)
    }

    fn validate(
        &self,
        role: ModelRole,
        image_id: &str,
        scores: RawScores,
    ) -> Result<ClassDistribution, InvalidDistribution> {
        let invalid = |reason: String| InvalidDistribution {
            image_id: image_id.to_string(),
            reason,
        };
        let scores = scores.map_err(invalid)?;
        let label_set = match role {
            ModelRole::Building => self.building_labels.clone(),
            ModelRole::Scene => scene_label_set(scores.keys().map(String::as_str)),
        };
        ClassDistribution::from_entries(&label_set, scores.iter().map(|(k, v)| (k.as_str(), *v)))
            .map_err(|e| invalid(e.to_string()))
    }
}

/// Scene label order: the whitelist in its fixed order, then any other
/// labels the backend reported, sorted.
pub fn scene_label_set<'a, I: IntoIterator<Item = &'a str>>(reported: I) -> Vec<String> {
    let mut labels: Vec<String> = SCENE_WHITELIST.iter().map(|s| s.to_string()).collect();
    let mut extra: Vec<String> = reported
        .into_iter()
        .filter(|l| !SCENE_WHITELIST.contains(l))
        .map(str::to_string)
        .collect();
    extra.sort();
    extra.dedup();
    labels.extend(extra);
    labels
}
