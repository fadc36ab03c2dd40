use std::collections::{BTreeMap, HashSet};
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rate_limit::RateLimiter;
use super::transport::{HttpResponse, Transport, TransportError};
use super::viewpoint::{build_image_request, build_metadata_request, sample_viewpoints, ViewpointParams, ViewpointSpec};
use super::{FetchStatus, ImageRecord, PanoMetadata, PanoStatus, StageStatus};
use crate::geo::{GeoError, GeoPoint};
use crate::jsonl::{self, JsonlError};
use crate::osm::BuildingRecord;

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff_ms: 500,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FetchError {
    #[error("building {id}: {source}")]
    Geometry {
        id: i64,
        #[source]
        source: GeoError,
    },
    #[error(transparent)]
    Records(#[from] JsonlError),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// Tallies over the final `images.jsonl`, plus this session's bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchReport {
    pub buildings: usize,
    pub resumed_buildings: usize,
    pub fetched: usize,
    pub no_pano: usize,
    pub failed: usize,
    pub duplicate_panos_skipped: usize,
}

/// Parses a street-view metadata response body.
pub fn parse_metadata(body: &[u8]) -> PanoMetadata {
    #[derive(Deserialize)]
    struct Location {
        lat: f64,
        lng: f64,
    }
    #[derive(Deserialize)]
    struct Raw {
        status: String,
        pano_id: Option<String>,
        location: Option<Location>,
    }

    let Ok(raw) = serde_json::from_slice::<Raw>(body) else {
        return PanoMetadata::error();
    };
    match raw.status.as_str() {
        "OK" => {
            let location = raw.location.and_then(|l| GeoPoint::new(l.lat, l.lng).ok());
            match (raw.pano_id, location) {
                (Some(id), Some(loc)) if !id.is_empty() => PanoMetadata {
                    status: PanoStatus::Ok,
                    pano_id: Some(id),
                    location: Some(loc),
                },
                _ => PanoMetadata::error(),
            }
        }
        "ZERO_RESULTS" | "NOT_FOUND" => PanoMetadata::zero_results(),
        _ => PanoMetadata::error(),
    }
}

fn sanitize_component(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// `cache/<pano_id>/<heading>.png`
pub(crate) fn cache_relative_path(pano_id: &str, v: &ViewpointSpec) -> String {
    format!("cache/{}/{}.png", sanitize_component(pano_id), v.heading_key())
}

fn to_png(body: &[u8]) -> Option<Vec<u8>> {
    if body.starts_with(PNG_MAGIC) {
        return Some(body.to_vec());
    }
    let img = image::load_from_memory(body).ok()?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).ok()?;
    Some(out.into_inner())
}

/// Downloads imagery for buildings into a content cache.
pub struct Fetcher<'a> {
    transport: &'a dyn Transport,
    limiter: RateLimiter,
    retry: RetryPolicy,
    api_key: String,
    cache_root: PathBuf,
}

impl<'a> Fetcher<'a> {
    /// Images land under `<cache_root>/cache/`.
    pub fn new(transport: &'a dyn Transport, cache_root: impl Into<PathBuf>, api_key: impl Into<String>) -> Self {
        Fetcher {
            transport,
            limiter: RateLimiter::unlimited(),
            retry: RetryPolicy::default(),
            api_key: api_key.into(),
            cache_root: cache_root.into(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, per_second: Option<u32>) -> Self {
        self.limiter = RateLimiter::per_second(per_second);
        self
    }

    pub fn cache_root(&self) -> &Path {
        &self.cache_root
    }

    fn request(&self, url: &str) -> Result<HttpResponse, TransportError> {
        let attempts = self.retry.attempts.max(1);
        let mut backoff = Duration::from_millis(self.retry.initial_backoff_ms);
        let mut last = TransportError::Network("no attempt made".into());
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(backoff);
                backoff *= 2;
            }
            self.limiter.acquire();
            match self.transport.get(url) {
                Ok(resp) if resp.status >= 500 => last = TransportError::Server(resp.status),
                Ok(resp) => return Ok(resp),
                Err(e) if e.is_retryable() => last = e,
                Err(e) => return Err(e),
            }
            log::debug!("attempt {} for {} failed: {last}", attempt + 1, super::redact_key(url));
        }
        Err(last)
    }

    /// Closest-panorama lookup. `ZERO_RESULTS` is a status, not an error.
    pub fn fetch_metadata(&self, v: &ViewpointSpec) -> Result<PanoMetadata, TransportError> {
        let resp = self.request(&build_metadata_request(v, &self.api_key))?;
        if resp.status != 200 {
            return Ok(PanoMetadata::error());
        }
        Ok(parse_metadata(&resp.body))
    }

    /// Fetches the image for a viewpoint whose panorama lookup succeeded.
    /// A cached file short-circuits the network.
    pub fn fetch_image(&self, building_id: i64, pano_id: &str, v: &ViewpointSpec) -> ImageRecord {
        let rel = cache_relative_path(pano_id, v);
        let abs = self.cache_root.join(&rel);
        let mut record = ImageRecord {
            building_id,
            pano_id: Some(pano_id.to_string()),
            viewpoint: *v,
            cache_path: None,
            fetch_status: FetchStatus::Failed,
            stage_status: StageStatus::Raw,
        };
        if abs.is_file() {
            record.cache_path = Some(rel);
            record.fetch_status = FetchStatus::Fetched;
            return record;
        }

        let png = match self.request(&build_image_request(v, &self.api_key)) {
            Ok(resp) if resp.status == 200 => to_png(&resp.body),
            Ok(resp) => {
                log::warn!("image for pano {pano_id} returned HTTP {}", resp.status);
                None
            }
            Err(e) => {
                log::warn!("image for pano {pano_id} failed: {e}");
                None
            }
        };
        if let Some(png) = png {
            match jsonl::write_atomic(&abs, &png) {
                Ok(()) => {
                    record.cache_path = Some(rel);
                    record.fetch_status = FetchStatus::Fetched;
                }
                Err(e) => log::warn!("cannot write {}: {e}", abs.display()),
            }
        }
        record
    }

    /// All image records for one building, in viewpoint order. Viewpoints that
    /// resolve to an already-seen panorama are dropped.
    pub fn fetch_building(
        &self,
        building: &BuildingRecord,
        params: &ViewpointParams,
    ) -> Result<(Vec<ImageRecord>, usize), FetchError> {
        let viewpoints = sample_viewpoints(building, params).map_err(|source| FetchError::Geometry {
            id: building.id,
            source,
        })?;
        let mut seen = HashSet::new();
        let mut duplicates = 0;
        let mut records = Vec::with_capacity(viewpoints.len());
        for v in viewpoints {
            let status = match self.fetch_metadata(&v) {
                Ok(meta) => match (meta.status, meta.pano_id) {
                    (PanoStatus::Ok, Some(pano)) => {
                        if seen.insert(pano.clone()) {
                            records.push(self.fetch_image(building.id, &pano, &v));
                        } else {
                            duplicates += 1;
                        }
                        continue;
                    }
                    (PanoStatus::ZeroResults, _) => FetchStatus::NoPano,
                    _ => FetchStatus::Failed,
                },
                Err(e) => {
                    log::warn!("metadata for building {} failed: {e}", building.id);
                    FetchStatus::Failed
                }
            };
            records.push(ImageRecord {
                building_id: building.id,
                pano_id: None,
                viewpoint: v,
                cache_path: None,
                fetch_status: status,
                stage_status: StageStatus::Raw,
            });
        }
        Ok((records, duplicates))
    }

    /// Fetches every building not yet present in `images_path`, appending one
    /// group of records per completed building, then rewrites the file in
    /// building-id order.
    pub fn fetch_all(
        &self,
        buildings: &[BuildingRecord],
        params: &ViewpointParams,
        images_path: &Path,
        workers: usize,
    ) -> Result<FetchReport, FetchError> {
        let recovered = jsonl::read_resumable::<ImageRecord>(images_path)?;
        let mut existing = recovered.records;
        if recovered.torn {
            // the last group may be incomplete
            if let Some(last) = existing.last().map(|r| r.building_id) {
                existing.retain(|r| r.building_id != last);
            }
        }
        if recovered.torn || !existing.is_empty() {
            jsonl::write_all(images_path, &existing)?;
        }
        let done: HashSet<i64> = existing.iter().map(|r| r.building_id).collect();
        let pending: Vec<&BuildingRecord> = buildings.iter().filter(|b| !done.contains(&b.id)).collect();

        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| FetchError::Pool(e.to_string()))?;
        let sink = Mutex::new(());
        let duplicates: Vec<usize> = pool.install(|| {
            pending
                .par_iter()
                .map(|b| {
                    let (records, dup) = self.fetch_building(b, params)?;
                    let _guard = sink.lock().expect("append lock poisoned");
                    jsonl::append(images_path, &records)?;
                    Ok(dup)
                })
                .collect::<Result<Vec<usize>, FetchError>>()
        })?;

        // canonical order: by building id, viewpoint order within a building
        let mut all = jsonl::read_all::<ImageRecord>(images_path).or_else(|e| match e {
            JsonlError::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            e => Err(e),
        })?;
        all.sort_by_key(|r| r.building_id);
        jsonl::write_all(images_path, &all)?;

        let mut report = FetchReport {
            buildings: all.iter().map(|r| r.building_id).collect::<HashSet<_>>().len(),
            resumed_buildings: done.len(),
            duplicate_panos_skipped: duplicates.iter().sum(),
            ..FetchReport::default()
        };
        for r in &all {
            match r.fetch_status {
                FetchStatus::Fetched => report.fetched += 1,
                FetchStatus::NoPano => report.no_pano += 1,
                FetchStatus::Failed => report.failed += 1,
            }
        }
        Ok(report)
    }
}

/// Groups image records by building id.
pub fn group_by_building(records: &[ImageRecord]) -> BTreeMap<i64, Vec<&ImageRecord>> {
    let mut groups: BTreeMap<i64, Vec<&ImageRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.building_id).or_default().push(r);
    }
    groups
}
