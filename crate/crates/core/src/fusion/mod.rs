//! Outlier removal by scene whitelist, per-building probability fusion and
//! linking of geo-tagged predictions to footprints.

mod exact;
mod stages;

use serde::{Deserialize, Serialize};

use crate::class::BuildingClass;
use crate::gateway::{ClassDistribution, DistributionError, SCENE_WHITELIST, SIMPLEX_TOLERANCE};
use crate::geo::GeoPoint;
use crate::imagery::{ImageRecord, StageStatus};
use crate::spatial::SpatialIndex;

pub use exact::exact_mean;
pub use stages::{
    classify_city, classify_kept, fuse_buildings, image_id, scene_filter, CityClassification, FilterOutcome,
    FuseOutcome, FusionConfig, ImageScore, RunReport,
};

/// Default linking radius in meters.
pub const DEFAULT_LINK_RADIUS_M: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FusionError {
    #[error("no distributions to fuse")]
    EmptyEvidence,
    #[error("distribution {index} has a different label set")]
    LabelMismatch { index: usize },
    #[error("fused distribution invalid: {0}")]
    Distribution(#[from] DistributionError),
}

/// Averaged distribution with its argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Fused {
    pub averaged: ClassDistribution,
    pub label_index: usize,
    pub confidence: f64,
}

impl Fused {
    pub fn label(&self) -> &str {
        &self.averaged.labels()[self.label_index]
    }
}

/// Averages `dists` component-wise and takes the argmax.
///
/// Each component mean is computed exactly and rounded once, so the result
/// does not depend on input order.
pub fn fuse(dists: &[ClassDistribution]) -> Result<Fused, FusionError> {
    let first = dists.first().ok_or(FusionError::EmptyEvidence)?;
    if let Some(index) = dists.iter().position(|d| d.labels() != first.labels()) {
        return Err(FusionError::LabelMismatch { index });
    }
    let mut column = Vec::with_capacity(dists.len());
    let probs: Vec<f64> = (0..first.len())
        .map(|i| {
            column.clear();
            column.extend(dists.iter().map(|d| d.probs()[i]));
            exact_mean(&column).expect("nonempty")
        })
        .collect();
    // inputs at the edge of the tolerance may drift by a few rounding steps
    let averaged = ClassDistribution::with_tolerance(first.labels().to_vec(), probs, SIMPLEX_TOLERANCE + 1e-12)?;
    let label_index = averaged.argmax();
    let confidence = averaged.probs()[label_index];
    Ok(Fused {
        averaged,
        label_index,
        confidence,
    })
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingPrediction {
    pub building_id: i64,
    pub label: BuildingClass,
    pub confidence: f64,
    pub images_used: usize,
    pub averaged: ClassDistribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnclassifiedReason {
    NoImagery,
    AllFiltered,
}

/// One line of `unclassified.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnclassifiedBuilding {
    pub building_id: i64,
    pub reason: UnclassifiedReason,
}

/// Scene categories that mark an image as showing a building.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Whitelist {
    pub labels: Vec<String>,
    /// An image is kept if any of its `top_k` scene labels is whitelisted.
    pub top_k: usize,
}

impl Default for Whitelist {
    fn default() -> Self {
        Whitelist {
            labels: SCENE_WHITELIST.iter().map(|s| s.to_string()).collect(),
            top_k: 1,
        }
    }
}

impl Whitelist {
    pub fn accepts(&self, scene: &ClassDistribution) -> bool {
        scene
            .top_k(self.top_k.max(1))
            .into_iter()
            .any(|i| self.labels.contains(&scene.labels()[i]))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{records} image records but {distributions} scene distributions")]
pub struct AlignmentError {
    pub records: usize,
    pub distributions: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Partition {
    pub kept: Vec<ImageRecord>,
    pub rejected: Vec<ImageRecord>,
}

/// Splits images by whether their scene prediction is whitelisted, setting
/// `stage_status` accordingly.
pub fn filter_outliers(
    records: &[ImageRecord],
    scene_dists: &[ClassDistribution],
    whitelist: &Whitelist,
) -> Result<Partition, AlignmentError> {
    if records.len() != scene_dists.len() {
        return Err(AlignmentError {
            records: records.len(),
            distributions: scene_dists.len(),
        });
    }
    let mut out = Partition::default();
    for (r, d) in records.iter().zip(scene_dists) {
        let mut r = r.clone();
        if whitelist.accepts(d) {
            r.stage_status = StageStatus::Kept;
            out.kept.push(r);
        } else {
            r.stage_status = StageStatus::RejectedOutlier;
            out.rejected.push(r);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment<P> {
    pub building_id: i64,
    pub distance_m: f64,
    pub payload: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linkage<P> {
    pub assigned: Vec<Assignment<P>>,
    pub unassigned: Vec<(GeoPoint, P)>,
}

/// Assigns each point to the nearest building centroid within `radius_m`.
pub fn link_predictions<P: Clone>(
    points: &[(GeoPoint, P)],
    buildings: &SpatialIndex<i64>,
    radius_m: f64,
) -> Linkage<P> {
    let mut linkage = Linkage {
        assigned: Vec::new(),
        unassigned: Vec::new(),
    };
    for (p, payload) in points {
        match buildings.nearest(*p, radius_m) {
            Some((building_id, distance_m)) => linkage.assigned.push(Assignment {
                building_id,
                distance_m,
                payload: payload.clone(),
            }),
            None => linkage.unassigned.push((*p, payload.clone())),
        }
    }
    linkage
}
