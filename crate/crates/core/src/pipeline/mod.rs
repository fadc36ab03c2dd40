//! Stage orchestration with a resumable run manifest.
//!
//! Every stage reads its inputs from and writes its outputs to the output
//! directory. `manifest.json` records which stages finished and the digests of
//! what they wrote, so a rerun skips finished work and a killed run resumes.

mod config;
mod manifest;

use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;

use crate::class::BuildingClass;
use crate::evaluation::{evaluate, render_table};
use crate::fusion::{classify_kept, fuse_buildings, scene_filter, FuseOutcome, ImageScore, RunReport};
use crate::gateway::{ClassifierBackend, Gateway, HttpBackend, StubBackend};
use crate::geo::BoundingBox;
use crate::imagery::{Fetcher, HttpTransport, ImageRecord, ReplayTransport, Transport, API_KEY_ENV};
use crate::jsonl;
use crate::maps::{density_grid, density_map, footprint_map, point_map, prediction_points, write_geojson};
use crate::osm::{parse_osm, read_buildings, write_buildings, BuildingRecord, TagMapping};

pub use config::{BackendKind, ClassifierConfig, ConfigError, EvalSection, FetchConfig, MapConfig, Paths, PipelineConfig};
pub use manifest::{file_digest, RunManifest, Stage, StageRecord, StageState};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

pub const BUILDINGS_FILE: &str = "buildings.jsonl";
pub const IMAGES_FILE: &str = "images.jsonl";
pub const FILTERED_FILE: &str = "filtered.jsonl";
pub const SCORES_FILE: &str = "building_scores.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const UNCLASSIFIED_FILE: &str = "unclassified.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const METRICS_TABLE_FILE: &str = "metrics.txt";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("another run holds the lock on {0}")]
    Locked(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unreadable manifest {path}: {message}")]
    Manifest { path: String, message: String },
    #[error("stage `{stage}` needs `{missing}` to finish first")]
    UpstreamIncomplete { stage: Stage, missing: Stage },
    #[error("stage `{stage}` failed: {message}")]
    StageFailed { stage: Stage, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    /// Already done with intact outputs.
    Skipped,
}

/// Stage-internal failure, reported as [`PipelineError::StageFailed`].
type StageResult<T> = Result<T, String>;

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// An open run: holds the output-directory lock until dropped.
pub struct Pipeline {
    config: PipelineConfig,
    out_dir: PathBuf,
    manifest: RunManifest,
    backend: Option<Box<dyn ClassifierBackend>>,
    transport: Option<Box<dyn Transport>>,
    _lock: File,
}

impl Pipeline {
    /// Validates `config`, takes the lock on its output directory and loads or
    /// creates the manifest. A changed config replaces the snapshot; finished
    /// stages whose own settings changed rerun when next invoked.
    pub fn open(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let out_dir = config.paths.out_dir.clone();
        fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;

        let lock_path = out_dir.join(LOCK_FILE);
        let lock = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(io_err(&lock_path))?;
        if lock.try_lock().is_err() {
            return Err(PipelineError::Locked(out_dir));
        }

        let manifest_path = out_dir.join(MANIFEST_FILE);
        let mut manifest = if manifest_path.is_file() {
            let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
            serde_json::from_str::<RunManifest>(&text).map_err(|e| PipelineError::Manifest {
                path: manifest_path.display().to_string(),
                message: e.to_string(),
            })?
        } else {
            RunManifest::new(config.clone())
        };
        if manifest.config != config {
            log::info!("configuration changed since the last invocation");
            manifest.config = config.clone();
            manifest.run_id = config.run_id();
        }

        let pipeline = Pipeline {
            config,
            out_dir,
            manifest,
            backend: None,
            transport: None,
            _lock: lock,
        };
        pipeline.save_manifest()?;
        Ok(pipeline)
    }

    /// Uses `backend` instead of the one described by the config.
    pub fn with_backend(mut self, backend: Box<dyn ClassifierBackend>) -> Self {
        self.backend = Some(backend);
        self
    }

    /// Uses `transport` instead of the one described by the config.
    pub fn with_transport(mut self, transport: Box<dyn Transport>) -> Self {
        self.transport = Some(transport);
        self
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    fn save_manifest(&self) -> Result<(), PipelineError> {
        let path = self.out_dir.join(MANIFEST_FILE);
        let mut bytes = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        bytes.push(b'\n');
        jsonl::write_atomic(&path, &bytes).map_err(io_err(&path))
    }

    /// Runs every stage in order.
    pub fn run_all(&mut self, force: bool) -> Result<Vec<(Stage, StageOutcome)>, PipelineError> {
        Stage::ALL
            .into_iter()
            .map(|s| self.run_stage(s, force).map(|o| (s, o)))
            .collect()
    }

    /// Runs one stage. A finished stage is skipped when its outputs are intact
    /// and the settings it reads are unchanged, unless `force` is set. Running
    /// a stage invalidates everything downstream.
    pub fn run_stage(&mut self, stage: Stage, force: bool) -> Result<StageOutcome, PipelineError> {
        if let Some(missing) = stage.upstream().find(|&s| !self.manifest.is_done(s)) {
            return Err(PipelineError::UpstreamIncomplete { stage, missing });
        }
        let settings = self.config.stage_digest(stage);
        if !force && self.manifest.is_done(stage) {
            if self.manifest.stage(stage).settings.as_deref() != Some(settings.as_str()) {
                log::info!("{stage}: settings changed since the stage finished; rerunning");
            } else if self.manifest.outputs_intact(stage, &self.out_dir) {
                log::info!("{stage}: already done");
                return Ok(StageOutcome::Skipped);
            } else {
                log::warn!("{stage}: outputs changed since the stage finished; rerunning");
            }
        }

        self.manifest.reset_from(stage);
        self.manifest.stage_mut(stage).status = StageState::Running;
        self.save_manifest()?;

        match self.execute(stage, force) {
            Ok((outputs, summary)) => {
                let mut digests = std::collections::BTreeMap::new();
                for file in outputs {
                    let path = self.out_dir.join(&file);
                    digests.insert(file, file_digest(&path).map_err(io_err(&path))?);
                }
                let record = self.manifest.stage_mut(stage);
                record.outputs = digests;
                record.summary = Some(summary);
                record.settings = Some(settings);
                record.status = StageState::Done;
                self.save_manifest()?;
                Ok(StageOutcome::Ran)
            }
            Err(message) => {
                self.manifest.stage_mut(stage).status = StageState::Pending;
                self.save_manifest()?;
                Err(PipelineError::StageFailed { stage, message })
            }
        }
    }

    fn path(&self, file: &str) -> PathBuf {
        self.out_dir.join(file)
    }

    fn execute(&mut self, stage: Stage, force: bool) -> StageResult<(Vec<String>, serde_json::Value)> {
        match stage {
            Stage::Ingest => self.ingest(),
            Stage::Fetch => self.fetch(force),
            Stage::Filter => self.filter(),
            Stage::Classify => self.classify(),
            Stage::Fuse => self.fuse(),
            Stage::Eval => self.eval(),
            Stage::Map => self.map(),
        }
    }

    fn buildings(&self) -> StageResult<Vec<BuildingRecord>> {
        read_buildings(&self.path(BUILDINGS_FILE)).map_err(fail)
    }

    fn read<T: serde::de::DeserializeOwned>(&self, file: &str) -> StageResult<Vec<T>> {
        jsonl::read_all(&self.path(file)).map_err(fail)
    }

    fn write<T: Serialize>(&self, file: &str, records: &[T]) -> StageResult<()> {
        jsonl::write_all(&self.path(file), records).map_err(fail)
    }

    fn gateway(&mut self) -> StageResult<Gateway> {
        let c = &self.config.classifier;
        let backend: Box<dyn ClassifierBackend> = match self.backend.take() {
            Some(b) => b,
            None => match c.backend {
                BackendKind::Stub => Box::new(StubBackend::new(c.labels_dir.clone())),
                BackendKind::Http => Box::new(
                    HttpBackend::new(
                        c.scene_url.as_deref().unwrap_or_default(),
                        c.building_url.as_deref().unwrap_or_default(),
                        Duration::from_secs(c.timeout_s),
                        c.max_connections,
                    )
                    .map_err(fail)?,
                ),
            },
        };
        Ok(Gateway::new(backend)
            .with_batch_size(c.batch_size)
            .with_rejection_label(c.rejection_label.as_deref()))
    }

    /// Hands a gateway's backend back for the next stage.
    fn keep_backend(&mut self, gateway: Gateway) {
        self.backend = Some(gateway.into_backend());
    }

    fn ingest(&mut self) -> StageResult<(Vec<String>, serde_json::Value)> {
        let osm = self
            .config
            .paths
            .osm
            .clone()
            .ok_or("no OSM input configured (paths.osm or --osm)")?;
        let file = File::open(&osm).map_err(|e| format!("{}: {e}", osm.display()))?;
        let mapping = TagMapping::with_extra(&self.config.tags);
        let (records, report) = parse_osm(BufReader::new(file), self.config.bbox, &mapping).map_err(fail)?;
        log::info!(
            "ingest: {} buildings ({} labeled), {} ways skipped",
            records.len(),
            report.labeled,
            report.skipped_unclosed + report.skipped_unresolved + report.skipped_invalid
        );
        write_buildings(&self.path(BUILDINGS_FILE), &records).map_err(fail)?;
        Ok((vec![BUILDINGS_FILE.into()], serde_json::to_value(report).expect("report serializes")))
    }

    fn fetch(&mut self, force: bool) -> StageResult<(Vec<String>, serde_json::Value)> {
        let buildings = self.buildings()?;
        let images = self.path(IMAGES_FILE);
        if force && images.exists() {
            fs::remove_file(&images).map_err(fail)?;
        }
        let f = &self.config.fetch;
        let owned: Box<dyn Transport>;
        let transport: &dyn Transport = match (&self.transport, &f.replay_dir) {
            (Some(t), _) => t.as_ref(),
            (None, Some(dir)) => {
                owned = Box::new(ReplayTransport::new(dir));
                owned.as_ref()
            }
            (None, None) => {
                owned = Box::new(HttpTransport::new(Duration::from_secs(f.timeout_s)).map_err(fail)?);
                owned.as_ref()
            }
        };
        let api_key = match std::env::var(API_KEY_ENV) {
            Ok(k) if !k.is_empty() => k,
            _ if self.transport.is_some() || f.replay_dir.is_some() => String::new(),
            _ => return Err(format!("{API_KEY_ENV} is not set")),
        };
        let fetcher = Fetcher::new(transport, self.config.cache_root(), api_key)
            .with_retry(f.retry)
            .with_rate_limit(f.rate_limit);
        let report = fetcher
            .fetch_all(&buildings, &self.config.viewpoints, &images, f.workers)
            .map_err(fail)?;
        log::info!(
            "fetch: {} images fetched, {} without panorama, {} failed",
            report.fetched,
            report.no_pano,
            report.failed
        );
        Ok((vec![IMAGES_FILE.into()], serde_json::to_value(report).expect("report serializes")))
    }

    fn filter(&mut self) -> StageResult<(Vec<String>, serde_json::Value)> {
        let records: Vec<ImageRecord> = self.read(IMAGES_FILE)?;
        let gateway = self.gateway()?;
        let outcome = scene_filter(&gateway, &records, self.config.cache_root(), &self.config.filter);
        self.keep_backend(gateway);
        let outcome = outcome.map_err(fail)?;
        self.write(FILTERED_FILE, &outcome.records)?;
        log::info!("filter: {} kept, {} rejected, {} failed", outcome.kept, outcome.rejected, outcome.failed);
        let summary = serde_json::json!({"kept": outcome.kept, "rejected": outcome.rejected, "failed": outcome.failed});
        Ok((vec![FILTERED_FILE.into()], summary))
    }

    fn classify(&mut self) -> StageResult<(Vec<String>, serde_json::Value)> {
        let records: Vec<ImageRecord> = self.read(FILTERED_FILE)?;
        let gateway = self.gateway()?;
        let scores = classify_kept(&gateway, &records, self.config.cache_root());
        self.keep_backend(gateway);
        let scores = scores.map_err(fail)?;
        self.write(SCORES_FILE, &scores)?;
        let failed = scores.iter().filter(|s| s.distribution.is_none()).count();
        log::info!("classify: {} images scored, {failed} failed", scores.len() - failed);
        let summary = serde_json::json!({"scored": scores.len() - failed, "failed": failed});
        Ok((vec![SCORES_FILE.into()], summary))
    }

    fn fuse(&mut self) -> StageResult<(Vec<String>, serde_json::Value)> {
        let buildings = self.buildings()?;
        let records: Vec<ImageRecord> = self.read(FILTERED_FILE)?;
        let scores: Vec<ImageScore> = self.read(SCORES_FILE)?;
        let outcome: FuseOutcome = fuse_buildings(
            &buildings,
            &records,
            &scores,
            self.config.classifier.rejection_label.as_deref(),
        );
        self.write(PREDICTIONS_FILE, &outcome.predictions)?;
        self.write(UNCLASSIFIED_FILE, &outcome.unclassified)?;
        let report = RunReport::tally(buildings.len(), &records, &scores, &outcome);
        log::info!(
            "fuse: {} classified, {} without imagery, {} filtered out",
            report.predictions,
            report.unclassified_no_imagery,
            report.unclassified_all_filtered
        );
        Ok((
            vec![PREDICTIONS_FILE.into(), UNCLASSIFIED_FILE.into()],
            serde_json::to_value(report).expect("report serializes"),
        ))
    }

    fn eval(&mut self) -> StageResult<(Vec<String>, serde_json::Value)> {
        let buildings = self.buildings()?;
        let predictions = self.read(PREDICTIONS_FILE)?;
        let unclassified = self.read(UNCLASSIFIED_FILE)?;
        let report = evaluate(&buildings, &predictions, &unclassified, &self.config.evaluation()).map_err(fail)?;
        let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
        json.push(b'\n');
        jsonl::write_atomic(&self.path(METRICS_FILE), &json).map_err(fail)?;
        jsonl::write_atomic(&self.path(METRICS_TABLE_FILE), render_table(&report).as_bytes()).map_err(fail)?;
        log::info!("eval: accuracy {:.4} over {} buildings", report.accuracy, report.counts.evaluated);
        let summary = serde_json::json!({
            "evaluated": report.counts.evaluated,
            "accuracy": report.accuracy,
            "overall": report.metrics.overall,
        });
        Ok((vec![METRICS_FILE.into(), METRICS_TABLE_FILE.into()], summary))
    }

    fn map(&mut self) -> StageResult<(Vec<String>, serde_json::Value)> {
        let buildings = self.buildings()?;
        let predictions = self.read(PREDICTIONS_FILE)?;
        let unclassified = self.read(UNCLASSIFIED_FILE)?;
        let mut outputs = vec!["footprints.geojson".to_string(), "points.geojson".to_string()];
        let floor = self.config.map.opacity_floor;
        write_geojson(&self.path(&outputs[0]), &footprint_map(&buildings, &predictions, &unclassified, floor))
            .map_err(fail)?;
        write_geojson(&self.path(&outputs[1]), &point_map(&buildings, &predictions)).map_err(fail)?;

        let points: Vec<_> = prediction_points(&buildings, &predictions)
            .into_iter()
            .map(|(_, p, class, _)| (p, class))
            .collect();
        let bbox = self
            .config
            .bbox
            .or_else(|| BoundingBox::enclosing(buildings.iter().map(|b| b.footprint.centroid())));
        match bbox.filter(|b| !b.is_empty()) {
            Some(bbox) => {
                for class in BuildingClass::ALL {
                    let grid = density_grid(&points, class, bbox, self.config.map.cell_size_deg).map_err(fail)?;
                    let file = format!("density_{class}.geojson");
                    write_geojson(&self.path(&file), &density_map(&grid)).map_err(fail)?;
                    outputs.push(file);
                }
            }
            None => log::warn!("map: buildings span no area; density maps skipped"),
        }
        let summary = serde_json::json!({"features": buildings.len(), "points": points.len()});
        Ok((outputs, summary))
    }
}
