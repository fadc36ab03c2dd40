use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fuse, BuildingPrediction, UnclassifiedBuilding, UnclassifiedReason, Whitelist};
use crate::class::BuildingClass;
use crate::gateway::{ClassDistribution, Gateway, GatewayError, ImageRef, ModelRole};
use crate::imagery::{FetchStatus, ImageRecord, StageStatus};
use crate::osm::BuildingRecord;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub whitelist: Whitelist,
    /// Optional ninth building label; a building fused to it is reported as
    /// unclassified.
    pub rejection_label: Option<String>,
}

/// Identifier sent to classifiers for an image.
pub fn image_id(record: &ImageRecord) -> String {
    format!("{}:{}", record.building_id, record.cache_path.as_deref().unwrap_or(""))
}

fn image_refs<'a, I: IntoIterator<Item = &'a ImageRecord>>(records: I, cache_root: &Path) -> Vec<ImageRef> {
    records
        .into_iter()
        .map(|r| ImageRef {
            id: image_id(r),
            path: cache_root.join(r.cache_path.as_deref().unwrap_or("")),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Every input record; fetched images carry their filter decision.
    pub records: Vec<ImageRecord>,
    pub kept: usize,
    pub rejected: usize,
    /// Fetched images the scene classifier could not score. They stay `raw`.
    pub failed: usize,
}

/// Runs the scene classifier over fetched images and applies the whitelist.
pub fn scene_filter(
    gateway: &Gateway,
    records: &[ImageRecord],
    cache_root: &Path,
    whitelist: &Whitelist,
) -> Result<FilterOutcome, GatewayError> {
    let fetched: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].fetch_status == FetchStatus::Fetched)
        .collect();
    let refs = image_refs(fetched.iter().map(|&i| &records[i]), cache_root);
    let results = gateway.classify_batch(&refs, ModelRole::Scene)?;

    let mut out = FilterOutcome {
        records: records.to_vec(),
        kept: 0,
        rejected: 0,
        failed: 0,
    };
    for (&i, result) in fetched.iter().zip(results) {
        let r = &mut out.records[i];
        match result {
            Ok(d) if whitelist.accepts(&d) => {
                r.stage_status = StageStatus::Kept;
                out.kept += 1;
            }
            Ok(_) => {
                r.stage_status = StageStatus::RejectedOutlier;
                out.rejected += 1;
            }
            Err(e) => {
                log::warn!("scene filter: {e}");
                r.stage_status = StageStatus::Raw;
                out.failed += 1;
            }
        }
    }
    Ok(out)
}

/// One line of `building_scores.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: String,
    pub building_id: i64,
    pub distribution: Option<ClassDistribution>,
    pub error: Option<String>,
}

/// Runs the building classifier over images the filter kept.
pub fn classify_kept(gateway: &Gateway, records: &[ImageRecord], cache_root: &Path) -> Result<Vec<ImageScore>, GatewayError> {
    let kept: Vec<&ImageRecord> = records
        .iter()
        .filter(|r| r.fetch_status == FetchStatus::Fetched && r.stage_status == StageStatus::Kept)
        .collect();
    let refs = image_refs(kept.iter().copied(), cache_root);
    let results = gateway.classify_batch(&refs, ModelRole::Building)?;
    Ok(kept
        .iter()
        .zip(refs)
        .zip(results)
        .map(|((r, img), result)| match result {
            Ok(d) => ImageScore {
                image_id: img.id,
                building_id: r.building_id,
                distribution: Some(d),
                error: None,
            },
            Err(e) => {
                log::warn!("building classifier: {e}");
                ImageScore {
                    image_id: img.id,
                    building_id: r.building_id,
                    distribution: None,
                    error: Some(e.reason),
                }
            }
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FuseOutcome {
    pub predictions: Vec<BuildingPrediction>,
    pub unclassified: Vec<UnclassifiedBuilding>,
}

enum Verdict {
    Predicted(BuildingPrediction),
    Unclassified(UnclassifiedBuilding),
}

/// Fuses each building's image distributions. Every building ends up in
/// exactly one of the two outputs, both sorted by building id.
pub fn fuse_buildings(
    buildings: &[BuildingRecord],
    records: &[ImageRecord],
    scores: &[ImageScore],
    rejection_label: Option<&str>,
) -> FuseOutcome {
    let with_imagery: HashSet<i64> = records
        .iter()
        .filter(|r| r.fetch_status == FetchStatus::Fetched)
        .map(|r| r.building_id)
        .collect();
    let mut evidence: BTreeMap<i64, Vec<ClassDistribution>> = BTreeMap::new();
    for s in scores {
        if let Some(d) = &s.distribution {
            evidence.entry(s.building_id).or_default().push(d.clone());
        }
    }

    let mut ids: Vec<i64> = buildings.iter().map(|b| b.id).collect();
    ids.sort_unstable();
    ids.dedup();

    let verdicts: Vec<Verdict> = ids
        .par_iter()
        .map(|&building_id| {
            let unclassified = |reason| Verdict::Unclassified(UnclassifiedBuilding { building_id, reason });
            if !with_imagery.contains(&building_id) {
                return unclassified(UnclassifiedReason::NoImagery);
            }
            let dists = evidence.get(&building_id).map(Vec::as_slice).unwrap_or(&[]);
            let fused = match fuse(dists) {
                Ok(f) => f,
                Err(e) => {
                    if !dists.is_empty() {
                        log::warn!("building {building_id}: {e}");
                    }
                    return unclassified(UnclassifiedReason::AllFiltered);
                }
            };
            if rejection_label == Some(fused.label()) {
                return unclassified(UnclassifiedReason::AllFiltered);
            }
            match fused.label().parse::<BuildingClass>() {
                Ok(label) => Verdict::Predicted(BuildingPrediction {
                    building_id,
                    label,
                    confidence: fused.confidence,
                    images_used: dists.len(),
                    averaged: fused.averaged,
                }),
                Err(e) => {
                    log::warn!("building {building_id}: {e}");
                    unclassified(UnclassifiedReason::AllFiltered)
                }
            }
        })
        .collect();

    let mut out = FuseOutcome::default();
    for v in verdicts {
        match v {
            Verdict::Predicted(p) => out.predictions.push(p),
            Verdict::Unclassified(u) => out.unclassified.push(u),
        }
    }
    out
}

/// Per-stage tallies of one classification run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub buildings: usize,
    pub images_fetched: usize,
    pub images_kept: usize,
    pub images_rejected: usize,
    pub scene_failures: usize,
    pub classify_failures: usize,
    pub predictions: usize,
    pub unclassified_no_imagery: usize,
    pub unclassified_all_filtered: usize,
}

impl RunReport {
    /// Counts from the filtered image records, the building scores and the
    /// fusion outcome.
    pub fn tally(buildings: usize, records: &[ImageRecord], scores: &[ImageScore], fused: &FuseOutcome) -> Self {
        let fetched = || records.iter().filter(|r| r.fetch_status == FetchStatus::Fetched);
        let stage = |s: StageStatus| fetched().filter(|r| r.stage_status == s).count();
        let reason = |r: UnclassifiedReason| fused.unclassified.iter().filter(|u| u.reason == r).count();
        RunReport {
            buildings,
            images_fetched: fetched().count(),
            images_kept: stage(StageStatus::Kept),
            images_rejected: stage(StageStatus::RejectedOutlier),
            scene_failures: stage(StageStatus::Raw),
            classify_failures: scores.iter().filter(|s| s.distribution.is_none()).count(),
            predictions: fused.predictions.len(),
            unclassified_no_imagery: reason(UnclassifiedReason::NoImagery),
            unclassified_all_filtered: reason(UnclassifiedReason::AllFiltered),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CityClassification {
    pub records: Vec<ImageRecord>,
    pub scores: Vec<ImageScore>,
    pub predictions: Vec<BuildingPrediction>,
    pub unclassified: Vec<UnclassifiedBuilding>,
    pub report: RunReport,
}

/// Filter, classify and fuse in one pass over fetched imagery.
pub fn classify_city(
    buildings: &[BuildingRecord],
    images: &[ImageRecord],
    gateway: &Gateway,
    config: &FusionConfig,
    cache_root: &Path,
) -> Result<CityClassification, GatewayError> {
    let filtered = scene_filter(gateway, images, cache_root, &config.whitelist)?;
    let scores = classify_kept(gateway, &filtered.records, cache_root)?;
    let fused = fuse_buildings(buildings, &filtered.records, &scores, config.rejection_label.as_deref());
    let report = RunReport::tally(buildings.len(), &filtered.records, &scores, &fused);
    Ok(CityClassification {
        records: filtered.records,
        scores,
        predictions: fused.predictions,
        unclassified: fused.unclassified,
        report,
    })
}
