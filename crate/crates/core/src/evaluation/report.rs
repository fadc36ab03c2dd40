use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    class_metrics, class_proportions, confusion, normalize_rows, sample_for_audit, Averaging, ClassMetrics,
    ConfusionMatrix, InsufficientPopulation, Proportions,
};
use crate::class::{BuildingClass, NUM_CLASSES};
use crate::fusion::{link_predictions, BuildingPrediction, UnclassifiedBuilding, UnclassifiedReason, DEFAULT_LINK_RADIUS_M};
use crate::osm::BuildingRecord;
use crate::spatial::SpatialIndex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub link_radius_m: f64,
    pub averaging: Averaging,
    /// Evaluate a random subset of this many buildings instead of all.
    pub sample_n: Option<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            link_radius_m: DEFAULT_LINK_RADIUS_M,
            averaging: Averaging::Weighted,
            sample_n: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Sample(#[from] InsufficientPopulation),
}

/// Bookkeeping for buildings that did not enter the confusion matrix.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub buildings: usize,
    pub predictions: usize,
    /// Predictions that reached a labeled building, before sampling.
    pub linked_labeled: usize,
    pub evaluated: usize,
    pub unlabeled_predictions: usize,
    pub unlinked_predictions: usize,
    pub unclassified_no_imagery: usize,
    pub unclassified_all_filtered: usize,
    /// Buildings with a truth label that received no prediction.
    pub labeled_unclassified: usize,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub confusion: ConfusionMatrix,
    pub normalized: [[f64; NUM_CLASSES]; NUM_CLASSES],
    pub metrics: ClassMetrics,
    pub accuracy: f64,
    pub proportions: Proportions,
    pub counts: EvalCounts,
    pub sample_n: Option<usize>,
    pub seed: u64,
}

/// Scores predictions against OSM truth labels.
///
/// Each prediction is placed at its building's centroid and linked to the
/// nearest footprint centroid within the configured radius; the linked
/// building's tag is the truth.
pub fn evaluate(
    buildings: &[BuildingRecord],
    predictions: &[BuildingPrediction],
    unclassified: &[UnclassifiedBuilding],
    config: &EvalConfig,
) -> Result<EvaluationReport, EvalError> {
    let by_id: HashMap<i64, &BuildingRecord> = buildings.iter().map(|b| (b.id, b)).collect();
    let index = SpatialIndex::build(buildings.iter().map(|b| (b.id, b.footprint.centroid())));

    let mut counts = EvalCounts {
        buildings: buildings.len(),
        predictions: predictions.len(),
        ..EvalCounts::default()
    };
    let mut points = Vec::with_capacity(predictions.len());
    for (i, p) in predictions.iter().enumerate() {
        match by_id.get(&p.building_id) {
            Some(b) => points.push((b.footprint.centroid(), i)),
            None => counts.unlinked_predictions += 1,
        }
    }
    let linkage = link_predictions(&points, &index, config.link_radius_m);
    counts.unlinked_predictions += linkage.unassigned.len();

    // truth building id -> (truth, predicted); a truth building keeps the
    // first prediction linked to it
    let mut pairs: HashMap<i64, (BuildingClass, BuildingClass)> = HashMap::new();
    for a in &linkage.assigned {
        match by_id[&a.building_id].truth_label {
            Some(truth) => {
                pairs.entry(a.building_id).or_insert((truth, predictions[a.payload].label));
            }
            None => counts.unlabeled_predictions += 1,
        }
    }
    counts.linked_labeled = pairs.len();

    let mut population: Vec<i64> = pairs.keys().copied().collect();
    population.sort_unstable();
    let evaluated = match config.sample_n {
        Some(n) => sample_for_audit(&population, n, config.seed)?,
        None => population,
    };
    counts.evaluated = evaluated.len();

    let predicted: std::collections::HashSet<i64> = predictions.iter().map(|p| p.building_id).collect();
    counts.labeled_unclassified = buildings
        .iter()
        .filter(|b| b.truth_label.is_some() && !predicted.contains(&b.id))
        .count();
    counts.unclassified_no_imagery = unclassified.iter().filter(|u| u.reason == UnclassifiedReason::NoImagery).count();
    counts.unclassified_all_filtered = unclassified.iter().filter(|u| u.reason == UnclassifiedReason::AllFiltered).count();

    let matrix = confusion(evaluated.iter().map(|id| pairs[id]));
    Ok(EvaluationReport {
        normalized: normalize_rows(&matrix),
        metrics: class_metrics(&matrix, config.averaging),
        accuracy: matrix.accuracy(),
        confusion: matrix,
        proportions: class_proportions(predictions),
        counts,
        sample_n: config.sample_n,
        seed: config.seed,
    })
}

/// Rounds the shortest decimal form of `x` half-up to `places` digits.
///
/// Working on the decimal string means 0.125 renders as 0.13, matching how a
/// reader would round the printed value.
pub fn round_half_up(x: f64, places: usize) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let repr = format!("{}", x.abs());
    let (int, frac) = repr.split_once('.').unwrap_or((&repr, ""));
    let mut digits: Vec<u8> = int.bytes().chain(frac.bytes().chain(std::iter::repeat(b'0')).take(places)).collect();
    if frac.len() > places && frac.as_bytes()[places] >= b'5' {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, b'1');
                break;
            }
            i -= 1;
            if digits[i] == b'9' {
                digits[i] = b'0';
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - places;
    let mut out = String::new();
    let nonzero = digits.iter().any(|&d| d != b'0');
    if x < 0.0 && nonzero {
        out.push('-');
    }
    out.push_str(std::str::from_utf8(&digits[..split]).expect("ascii"));
    if places > 0 {
        out.push('.');
        out.push_str(std::str::from_utf8(&digits[split..]).expect("ascii"));
    }
    out
}

fn display_name(class: BuildingClass) -> String {
    class.as_str().replace('_', " ")
}

/// Plain-text metrics table in the layout of a classification report.
pub fn render_table(report: &EvaluationReport) -> String {
    let mut s = String::new();
    let r2 = |x: f64| round_half_up(x, 2);
    let _ = writeln!(s, "{:<16} {:>9} {:>6} {:>8} {:>7}", "", "precision", "recall", "F1 score", "support");
    for row in &report.metrics.per_class {
        let _ = writeln!(
            s,
            "{:<16} {:>9} {:>6} {:>8} {:>7}",
            display_name(row.class),
            r2(row.precision),
            r2(row.recall),
            r2(row.f1),
            row.support
        );
    }
    let o = &report.metrics.overall;
    let label = match report.metrics.averaging {
        Averaging::Weighted => "overall",
        Averaging::Macro => "overall (macro)",
    };
    let _ = writeln!(
        s,
        "{:<16} {:>9} {:>6} {:>8} {:>7}",
        label,
        r2(o.precision),
        r2(o.recall),
        r2(o.f1),
        o.support
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "accuracy {}", r2(report.accuracy));
    let c = &report.counts;
    let _ = writeln!(
        s,
        "evaluated {} of {} buildings; unclassified: {} no imagery, {} all filtered",
        c.evaluated, c.buildings, c.unclassified_no_imagery, c.unclassified_all_filtered
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "normalized confusion matrix (rows = truth)");
    let header: Vec<String> = BuildingClass::ALL.iter().map(|c| format!("{:>6}", &c.as_str()[..c.as_str().len().min(6)])).collect();
    let _ = writeln!(s, "{:<16} {}", "", header.join(" "));
    for class in BuildingClass::ALL {
        let cells: Vec<String> = report.normalized[class.index()].iter().map(|&x| format!("{:>6}", r2(x))).collect();
        let _ = writeln!(s, "{:<16} {}", display_name(class), cells.join(" "));
    }
    s
}
