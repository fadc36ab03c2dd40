//! Building instance classification: OSM footprints, street-level imagery,
//! per-image class distributions fused into per-building labels, evaluation,
//! and GeoJSON map products.

pub mod class;
pub mod evaluation;
pub mod fusion;
pub mod gateway;
pub mod geo;
pub mod imagery;
pub mod jsonl;
pub mod maps;
pub mod osm;
pub mod pipeline;
pub mod spatial;

pub use class::{BuildingClass, NUM_CLASSES};
pub use geo::{BoundingBox, FootprintPolygon, GeoError, GeoPoint};
pub use osm::{BuildingRecord, ParseReport};
pub use spatial::SpatialIndex;
