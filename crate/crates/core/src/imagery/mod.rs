//! Street-level imagery acquisition: viewpoint sampling, request building,
//! metadata lookup and cached, rate-limited image download.

mod fetch;
mod rate_limit;
mod transport;
mod viewpoint;

use serde::{Deserialize, Serialize};

use crate::geo::GeoPoint;

pub use fetch::{group_by_building, parse_metadata, FetchError, FetchReport, Fetcher, RetryPolicy};
pub use rate_limit::RateLimiter;
pub use transport::{
    redact_key, replay_key, HttpResponse, HttpTransport, ReplayMeta, ReplayTransport, Transport,
    TransportError,
};
pub use viewpoint::{
    build_image_request, build_metadata_request, sample_viewpoints, ViewpointError, ViewpointParams,
    ViewpointSpec, DEFAULT_FOV, DEFAULT_IMAGE_SIZE, DEFAULT_PITCH, IMAGE_ENDPOINT, METADATA_ENDPOINT,
};

/// Environment variable holding the street-view API key for live fetches.
pub const API_KEY_ENV: &str = "SV_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PanoStatus {
    Ok,
    ZeroResults,
    Error,
}

/// Closest-panorama lookup result. `pano_id` and `location` are set iff
/// the status is `Ok`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanoMetadata {
    pub status: PanoStatus,
    pub pano_id: Option<String>,
    pub location: Option<GeoPoint>,
}

impl PanoMetadata {
    pub fn zero_results() -> Self {
        PanoMetadata {
            status: PanoStatus::ZeroResults,
            pano_id: None,
            location: None,
        }
    }

    pub fn error() -> Self {
        PanoMetadata {
            status: PanoStatus::Error,
            pano_id: None,
            location: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FetchStatus {
    Fetched,
    NoPano,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Raw,
    Kept,
    RejectedOutlier,
}

/// One line of `images.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub building_id: i64,
    pub pano_id: Option<String>,
    pub viewpoint: ViewpointSpec,
    /// Relative to the cache root; present iff `fetch_status == Fetched`.
    pub cache_path: Option<String>,
    pub fetch_status: FetchStatus,
    pub stage_status: StageStatus,
}
