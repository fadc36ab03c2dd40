use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::manifest::Stage;
use crate::class::BuildingClass;
use crate::evaluation::{Averaging, EvalConfig};
use crate::fusion::{FusionConfig, Whitelist, DEFAULT_LINK_RADIUS_M};
use crate::geo::BoundingBox;
use crate::imagery::{RetryPolicy, ViewpointParams};
use crate::maps::DEFAULT_OPACITY_FLOOR;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// OSM XML extract read by `ingest`.
    pub osm: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Images are cached under `<cache_root>/cache/`. Defaults to `out_dir`.
    pub cache_root: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            osm: None,
            out_dir: PathBuf::from("out"),
            cache_root: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FetchConfig {
    pub workers: usize,
    /// Requests per second against the live service; unlimited when absent.
    pub rate_limit: Option<u32>,
    pub retry: RetryPolicy,
    pub timeout_s: u64,
    /// Serve requests from a recorded archive instead of the network.
    pub replay_dir: Option<PathBuf>,
}

impl Default for FetchConfig {
    fn default() -> Self {
        FetchConfig {
            workers: 4,
            rate_limit: None,
            retry: RetryPolicy::default(),
            timeout_s: 30,
            replay_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Stub,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub backend: BackendKind,
    pub scene_url: Option<String>,
    pub building_url: Option<String>,
    /// Content-hash label files for the stub backend.
    pub labels_dir: Option<PathBuf>,
    pub batch_size: usize,
    pub timeout_s: u64,
    pub max_connections: usize,
    pub rejection_label: Option<String>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            backend: BackendKind::Stub,
            scene_url: None,
            building_url: None,
            labels_dir: None,
            batch_size: 32,
            timeout_s: 30,
            max_connections: 4,
            rejection_label: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub averaging: Averaging,
    pub sample_n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub opacity_floor: f64,
    /// Density grid cell edge in degrees.
    pub cell_size_deg: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            opacity_floor: DEFAULT_OPACITY_FLOOR,
            cell_size_deg: 0.01,
        }
    }
}

/// Everything a run depends on. Loaded from TOML; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub bbox: Option<BoundingBox>,
    /// Extra OSM tag values mapped onto classes, e.g. `detached = "house"`.
    pub tags: BTreeMap<String, BuildingClass>,
    pub viewpoints: ViewpointParams,
    pub fetch: FetchConfig,
    pub classifier: ClassifierConfig,
    pub filter: Whitelist,
    pub link_radius_m: f64,
    pub eval: EvalSection,
    pub map: MapConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: Paths::default(),
            bbox: None,
            tags: BTreeMap::new(),
            viewpoints: ViewpointParams::default(),
            fetch: FetchConfig::default(),
            classifier: ClassifierConfig::default(),
            filter: Whitelist::default(),
            link_radius_m: DEFAULT_LINK_RADIUS_M,
            eval: EvalSection::default(),
            map: MapConfig::default(),
            seed: 0,
        }
    }
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

impl PipelineConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let config: PipelineConfig = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: origin.to_string(),
            source,
        })?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let v = &self.viewpoints;
        if v.count == 0 {
            return Err(invalid("viewpoints.count must be at least 1"));
        }
        if !(v.offset_m > 0.0 && v.offset_m.is_finite()) {
            return Err(invalid("viewpoints.offset_m must be positive"));
        }
        if !(-90.0..=90.0).contains(&v.pitch) {
            return Err(invalid("viewpoints.pitch must be within [-90, 90]"));
        }
        if v.width == 0 || v.height == 0 {
            return Err(invalid("viewpoints image size must be positive"));
        }
        if !(v.fov > 0.0 && v.fov <= 120.0) {
            return Err(invalid("viewpoints.fov must be within (0, 120]"));
        }
        if self.fetch.workers == 0 {
            return Err(invalid("fetch.workers must be at least 1"));
        }
        if self.fetch.rate_limit == Some(0) {
            return Err(invalid("fetch.rate_limit must be positive"));
        }
        if self.fetch.retry.attempts == 0 {
            return Err(invalid("fetch.retry.attempts must be at least 1"));
        }
        if self.classifier.batch_size == 0 {
            return Err(invalid("classifier.batch_size must be at least 1"));
        }
        if self.classifier.backend == BackendKind::Http
            && (self.classifier.scene_url.is_none() || self.classifier.building_url.is_none())
        {
            return Err(invalid("the http backend needs classifier.scene_url and classifier.building_url"));
        }
        if let Some(label) = &self.classifier.rejection_label {
            if BuildingClass::ALL.iter().any(|c| c.as_str() == label) {
                return Err(invalid(format!("rejection label `{label}` collides with a building class")));
            }
        }
        if self.filter.top_k == 0 || self.filter.labels.is_empty() {
            return Err(invalid("filter needs at least one label and top_k >= 1"));
        }
        if !(self.link_radius_m > 0.0 && self.link_radius_m.is_finite()) {
            return Err(invalid("link_radius_m must be positive"));
        }
        if !(0.0..=1.0).contains(&self.map.opacity_floor) {
            return Err(invalid("map.opacity_floor must be within [0, 1]"));
        }
        if !(self.map.cell_size_deg > 0.0 && self.map.cell_size_deg.is_finite()) {
            return Err(invalid("map.cell_size_deg must be positive"));
        }
        if let Some(b) = &self.bbox {
            if b.is_empty() {
                return Err(invalid("bbox has no area"));
            }
        }
        Ok(())
    }

    pub fn cache_root(&self) -> &Path {
        self.paths.cache_root.as_deref().unwrap_or(&self.paths.out_dir)
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            whitelist: self.filter.clone(),
            rejection_label: self.classifier.rejection_label.clone(),
        }
    }

    pub fn evaluation(&self) -> EvalConfig {
        EvalConfig {
            link_radius_m: self.link_radius_m,
            averaging: self.eval.averaging,
            sample_n: self.eval.sample_n,
            seed: self.seed,
        }
    }

    /// Digest of the settings `stage` reads. Worker counts, timeouts and other
    /// knobs that cannot change a stage's outputs are left out.
    pub fn stage_digest(&self, stage: Stage) -> String {
        let c = &self.classifier;
        let inputs = match stage {
            Stage::Ingest => serde_json::json!([self.paths.osm, self.bbox, self.tags]),
            Stage::Fetch => serde_json::json!([self.viewpoints, self.cache_root()]),
            Stage::Filter => serde_json::json!([self.filter, c.backend, c.scene_url, c.labels_dir]),
            Stage::Classify => serde_json::json!([c.backend, c.building_url, c.labels_dir, c.rejection_label]),
            Stage::Fuse => serde_json::json!([c.rejection_label]),
            Stage::Eval => serde_json::json!([self.link_radius_m, self.eval, self.seed]),
            Stage::Map => serde_json::json!([self.map]),
        };
        let bytes = serde_json::to_vec(&inputs).expect("settings serialize");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    /// Short digest of the full configuration.
    pub fn run_id(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = PipelineConfig::default();
        assert_eq!(c.viewpoints.count, 4);
        assert_eq!(c.viewpoints.offset_m, 30.0);
        assert_eq!(c.viewpoints.pitch, 10.0);
        assert_eq!((c.viewpoints.width, c.viewpoints.height), (512, 512));
        assert_eq!(c.viewpoints.fov, 90.0);
        assert_eq!(c.filter.top_k, 1);
        assert_eq!(c.filter.labels.len(), 10);
        assert_eq!(c.link_radius_m, 50.0);
        assert_eq!(c.fetch.retry.attempts, 3);
        assert_eq!(c.fetch.retry.initial_backoff_ms, 500);
        assert_eq!(c.classifier.timeout_s, 30);
        assert_eq!(c.map.opacity_floor, 0.15);
        assert_eq!(c.cache_root(), Path::new("out"));
        c.validate().unwrap();
    }

    #[test]
    fn empty_toml_is_default() {
        assert_eq!(PipelineConfig::from_toml("", "x").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn toml_overrides() {
        let c = PipelineConfig::from_toml(
            r#"
seed = 7
link_radius_m = 25.0
bbox = { south = 51.0, west = -114.1, north = 51.1, east = -114.0 }

[paths]
out_dir = "run"

[viewpoints]
count = 2

[fetch]
rate_limit = 20
retry = { attempts = 5 }

[classifier]
backend = "http"
scene_url = "http://localhost:8001"
building_url = "http://localhost:8002"

[tags]
detached = "house"

[eval]
averaging = "macro"
sample_n = 1000
"#,
            "inline",
        )
        .unwrap();
        c.validate().unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.viewpoints.count, 2);
        assert_eq!(c.viewpoints.pitch, 10.0);
        assert_eq!(c.fetch.retry.attempts, 5);
        assert_eq!(c.fetch.retry.initial_backoff_ms, 500);
        assert_eq!(c.tags["detached"], BuildingClass::House);
        assert_eq!(c.evaluation().sample_n, Some(1000));
        assert_eq!(c.evaluation().seed, 7);
        assert_eq!(c.cache_root(), Path::new("run"));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(PipelineConfig::from_toml("bogus = 1", "x").is_err());
        let mut c = PipelineConfig::default();
        c.viewpoints.fov = 150.0;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.classifier.backend = BackendKind::Http;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.classifier.rejection_label = Some("house".into());
        assert!(c.validate().is_err());
    }

    #[test]
    fn run_id_tracks_config() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.run_id(), b.run_id());
        b.seed = 1;
        assert_ne!(a.run_id(), b.run_id());
        assert_eq!(a.run_id().len(), 16);
    }

    #[test]
    fn stage_digest_tracks_only_what_the_stage_reads() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.eval.sample_n = Some(10);
        b.fetch.workers = 16;
        assert_ne!(a.stage_digest(Stage::Eval), b.stage_digest(Stage::Eval));
        for s in [Stage::Ingest, Stage::Fetch, Stage::Filter, Stage::Classify, Stage::Fuse, Stage::Map] {
            assert_eq!(a.stage_digest(s), b.stage_digest(s), "{s}");
        }
    }
}
