//! GeoJSON map products: footprints shaded by confidence, classified points,
//! and per-class density grids.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::class::BuildingClass;
use crate::fusion::{BuildingPrediction, UnclassifiedBuilding};
use crate::geo::{BoundingBox, GeoPoint};
use crate::jsonl;
use crate::osm::BuildingRecord;

/// Opacity given to the least confident and to unclassified buildings.
pub const DEFAULT_OPACITY_FLOOR: f64 = 0.15;

pub const UNCLASSIFIED: &str = "unclassified";
const UNCLASSIFIED_COLOR: &str = "#9e9e9e";

#[derive(Debug, thiserror::Error)]
pub enum MapError {
    #[error("bounding box has no area")]
    EmptyBbox,
    #[error("cell size must be positive, got {0}")]
    InvalidCellSize(f64),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn class_color(class: BuildingClass) -> &'static str {
    match class {
        BuildingClass::Apartment => "#1f77b4",
        BuildingClass::Church => "#9467bd",
        BuildingClass::Garage => "#7f7f7f",
        BuildingClass::House => "#2ca02c",
        BuildingClass::Industrial => "#8c564b",
        BuildingClass::OfficeBuilding => "#d62728",
        BuildingClass::Retail => "#ff7f0e",
        BuildingClass::Roof => "#17becf",
    }
}

fn color_table() -> Value {
    let mut table = serde_json::Map::new();
    for c in BuildingClass::ALL {
        table.insert(c.as_str().to_string(), json!(class_color(c)));
    }
    table.insert(UNCLASSIFIED.to_string(), json!(UNCLASSIFIED_COLOR));
    Value::Object(table)
}

/// Linear in confidence, clamped to `[floor, 1]`.
pub fn opacity(confidence: f64, floor: f64) -> f64 {
    confidence.clamp(floor, 1.0)
}

fn collection(features: Vec<Value>) -> Value {
    json!({
        "type": "FeatureCollection",
        "class_colors": color_table(),
        "features": features,
    })
}

/// One polygon feature per building. Buildings without a prediction are
/// drawn as unclassified at the floor opacity.
pub fn footprint_map(
    buildings: &[BuildingRecord],
    predictions: &[BuildingPrediction],
    unclassified: &[UnclassifiedBuilding],
    opacity_floor: f64,
) -> Value {
    let preds: HashMap<i64, &BuildingPrediction> = predictions.iter().map(|p| (p.building_id, p)).collect();
    let reasons: HashMap<i64, &UnclassifiedBuilding> = unclassified.iter().map(|u| (u.building_id, u)).collect();
    let mut sorted: Vec<&BuildingRecord> = buildings.iter().collect();
    sorted.sort_by_key(|b| b.id);

    let features = sorted
        .into_iter()
        .map(|b| {
            let ring: Vec<[f64; 2]> = b.footprint.ring().iter().map(GeoPoint::lon_lat).collect();
            let mut props = json!({
                "building_id": b.id,
                "truth": b.truth_label.map(BuildingClass::as_str),
            });
            let extra = match preds.get(&b.id) {
                Some(p) => json!({
                    "class": p.label.as_str(),
                    "confidence": p.confidence,
                    "opacity": opacity(p.confidence, opacity_floor),
                    "color": class_color(p.label),
                }),
                None => json!({
                    "class": UNCLASSIFIED,
                    "confidence": null,
                    "opacity": opacity_floor,
                    "color": UNCLASSIFIED_COLOR,
                    "reason": reasons.get(&b.id).map(|u| u.reason),
                }),
            };
            merge(&mut props, extra);
            json!({
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": [ring]},
                "properties": props,
            })
        })
        .collect();
    collection(features)
}

fn merge(into: &mut Value, from: Value) {
    if let (Value::Object(a), Value::Object(b)) = (into, from) {
        a.extend(b);
    }
}

/// Classified buildings as points at their footprint centroids, sorted by
/// building id. Predictions for unknown buildings are dropped.
pub fn prediction_points(
    buildings: &[BuildingRecord],
    predictions: &[BuildingPrediction],
) -> Vec<(i64, GeoPoint, BuildingClass, f64)> {
    let by_id: HashMap<i64, &BuildingRecord> = buildings.iter().map(|b| (b.id, b)).collect();
    let mut out: Vec<_> = predictions
        .iter()
        .filter_map(|p| {
            by_id
                .get(&p.building_id)
                .map(|b| (p.building_id, b.footprint.centroid(), p.label, p.confidence))
        })
        .collect();
    out.sort_by_key(|t| t.0);
    out
}

pub fn point_map(buildings: &[BuildingRecord], predictions: &[BuildingPrediction]) -> Value {
    let features = prediction_points(buildings, predictions)
        .into_iter()
        .map(|(id, p, class, confidence)| {
            json!({
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": p.lon_lat()},
                "properties": {
                    "building_id": id,
                    "class": class.as_str(),
                    "confidence": confidence,
                    "color": class_color(class),
                },
            })
        })
        .collect();
    collection(features)
}

/// Counts of one class on a regular lat/lon grid. Row 0 is the southern
/// edge, column 0 the western edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub class: BuildingClass,
    pub bbox: BoundingBox,
    pub cell_size: f64,
    pub rows: usize,
    pub cols: usize,
    pub counts: Vec<Vec<u64>>,
}

impl DensityGrid {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

fn cells(span: f64, cell_size: f64) -> usize {
    // absorb representation error so 0.02 / 0.01 gives 2 cells, not 3
    ((span / cell_size) - 1e-9).ceil().max(1.0) as usize
}

fn bin(coord: f64, origin: f64, cell_size: f64, n: usize) -> usize {
    (((coord - origin) / cell_size).floor().max(0.0) as usize).min(n - 1)
}

/// Bins points of `class` that fall inside `bbox`. Points on the north or
/// east edge land in the last row or column.
pub fn density_grid(
    points: &[(GeoPoint, BuildingClass)],
    class: BuildingClass,
    bbox: BoundingBox,
    cell_size: f64,
) -> Result<DensityGrid, MapError> {
    if !(cell_size > 0.0 && cell_size.is_finite()) {
        return Err(MapError::InvalidCellSize(cell_size));
    }
    if bbox.is_empty() {
        return Err(MapError::EmptyBbox);
    }
    let rows = cells(bbox.north - bbox.south, cell_size);
    let cols = cells(bbox.east - bbox.west, cell_size);
    let mut counts = vec![vec![0u64; cols]; rows];
    for (p, c) in points {
        if *c != class || !bbox.contains(*p) {
            continue;
        }
        let r = bin(p.lat(), bbox.south, cell_size, rows);
        let k = bin(p.lon(), bbox.west, cell_size, cols);
        counts[r][k] += 1;
    }
    Ok(DensityGrid {
        class,
        bbox,
        cell_size,
        rows,
        cols,
        counts,
    })
}

/// Non-empty grid cells as polygons with a `count` property.
pub fn density_map(grid: &DensityGrid) -> Value {
    let mut features = Vec::new();
    for (r, row) in grid.counts.iter().enumerate() {
        for (k, &count) in row.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let s = grid.bbox.south + r as f64 * grid.cell_size;
            let w = grid.bbox.west + k as f64 * grid.cell_size;
            let n = (s + grid.cell_size).min(grid.bbox.north);
            let e = (w + grid.cell_size).min(grid.bbox.east);
            features.push(json!({
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": [[[w, s], [e, s], [e, n], [w, n], [w, s]]]},
                "properties": {"row": r, "col": k, "count": count, "class": grid.class.as_str()},
            }));
        }
    }
    collection(features)
}

/// Writes a document as pretty-printed JSON with a trailing newline.
pub fn write_geojson(path: &Path, doc: &Value) -> Result<(), MapError> {
    let mut bytes = serde_json::to_vec_pretty(doc).expect("JSON values serialize");
    bytes.push(b'\n');
    jsonl::write_atomic(path, &bytes).map_err(|source| MapError::Io {
        path: path.display().to_string(),
        source,
    })
}
