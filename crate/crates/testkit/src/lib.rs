//! Synthetic-city fixtures: an OSM extract with planted classes, a replay
//! archive for the street-view service, and content-hash label files for the
//! stub classifier. The generated [`CityPlan`] is the oracle for tests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Cursor};
use std::path::{Path, PathBuf};

use bic_core::imagery::{
    build_image_request, build_metadata_request, sample_viewpoints, ReplayTransport, RetryPolicy, ViewpointParams,
};
use bic_core::osm::{parse_osm, TagMapping};
use bic_core::pipeline::PipelineConfig;
use bic_core::{BoundingBox, BuildingClass};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const BUILDINGS: usize = 50;
const ORIGIN: (f64, f64) = (51.0400, -114.0800);
const SPACING_DEG: f64 = 0.002;
const COLUMNS: usize = 10;
const HALF_LAT: f64 = 0.00009;
const HALF_LON: f64 = 0.00012;

const KEPT_SCENES: [&str; 5] = ["building facade", "house", "apartment", "hotel", "parking garage"];
const OUTLIER_SCENES: [&str; 4] = ["restaurant", "forest path", "bedroom", "parking lot"];

/// What the pipeline must conclude for a building.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Classified,
    NoImagery,
    AllFiltered,
}

/// What the street-view archive answers for one viewpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shot {
    /// Image kept by the scene filter, labeled with the planted class.
    Kept,
    /// Kept through a top-1 tie between a whitelisted and an outlier scene.
    KeptTie,
    /// Outlier scene, labeled with a wrong class.
    Outlier,
    /// Same panorama as the previous viewpoint.
    Duplicate,
    ZeroResults,
    NotFound,
    MetadataError,
    ImageError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedBuilding {
    pub id: i64,
    pub class: BuildingClass,
    pub centroid: (f64, f64),
    pub outcome: Outcome,
    pub shots: Vec<Shot>,
}

/// Expected results, written to `plan.json` beside the fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityPlan {
    pub buildings: Vec<PlannedBuilding>,
    pub bbox: BoundingBox,
    /// Replay entries that answer image requests.
    pub image_entries: usize,
    pub metadata_entries: usize,
    pub images_fetched: usize,
    pub images_kept: usize,
    pub images_rejected: usize,
    pub duplicate_panos: usize,
    pub no_pano: usize,
    pub failed: usize,
    pub predictions: usize,
    pub unclassified_no_imagery: usize,
    pub unclassified_all_filtered: usize,
    /// Planted classes of the buildings expected to be classified.
    pub class_counts: BTreeMap<BuildingClass, usize>,
}

impl CityPlan {
    pub fn unclassified(&self) -> usize {
        self.unclassified_no_imagery + self.unclassified_all_filtered
    }

    pub fn building(&self, id: i64) -> Option<&PlannedBuilding> {
        self.buildings.iter().find(|b| b.id == id)
    }
}

/// Paths of a generated fixture.
#[derive(Debug, Clone)]
pub struct SyntheticCity {
    pub root: PathBuf,
    pub osm: PathBuf,
    pub replay_dir: PathBuf,
    pub labels_dir: PathBuf,
    pub plan: CityPlan,
}

impl SyntheticCity {
    /// Offline configuration that runs the whole pipeline over the fixture.
    pub fn config(&self, out_dir: &Path) -> PipelineConfig {
        let mut config = PipelineConfig::default();
        config.paths.osm = Some(self.osm.clone());
        config.paths.out_dir = out_dir.to_path_buf();
        config.fetch.replay_dir = Some(self.replay_dir.clone());
        config.fetch.retry = RetryPolicy {
            attempts: 2,
            initial_backoff_ms: 1,
        };
        config.classifier.labels_dir = Some(self.labels_dir.clone());
        config
    }
}

fn tag_for(class: BuildingClass) -> &'static str {
    match class {
        BuildingClass::Apartment => "apartments",
        BuildingClass::Church => "church",
        BuildingClass::Garage => "garage",
        BuildingClass::House => "house",
        BuildingClass::Industrial => "industrial",
        BuildingClass::OfficeBuilding => "office",
        BuildingClass::Retail => "retail",
        BuildingClass::Roof => "roof",
    }
}

/// Per-building shot layout. The first seven buildings are the unclassified ones.
fn shots_for(index: usize) -> (Outcome, Vec<Shot>) {
    use Shot::*;
    match index {
        0 => (Outcome::NoImagery, vec![ZeroResults; 4]),
        1 => (Outcome::NoImagery, vec![ZeroResults, NotFound, NotFound, ZeroResults]),
        2 => (Outcome::NoImagery, vec![MetadataError; 4]),
        3 => (Outcome::NoImagery, vec![ImageError, ZeroResults, MetadataError, ZeroResults]),
        4..=6 => (Outcome::AllFiltered, vec![Outlier, Outlier, ZeroResults, Outlier]),
        _ => {
            let shots = match index % 4 {
                0 => vec![Kept, Kept, Kept, Kept],
                1 => vec![Kept, Duplicate, Kept, Duplicate],
                2 => vec![KeptTie, ZeroResults, Outlier, Kept],
                _ => vec![Outlier, Kept, Outlier, ImageError],
            };
            (Outcome::Classified, shots)
        }
    }
}

fn wrong_class(class: BuildingClass) -> BuildingClass {
    BuildingClass::ALL[(class.index() + 3) % BuildingClass::ALL.len()]
}

fn coord(x: f64) -> String {
    format!("{x:.7}")
}

/// An 8x8 PNG whose pixels encode `(building, viewpoint)`, so every image
/// has distinct bytes and therefore a distinct content hash.
fn unique_png(building: usize, viewpoint: usize) -> Vec<u8> {
    let img = image::RgbImage::from_fn(8, 8, |x, y| {
        image::Rgb([building as u8, viewpoint as u8, (x * 8 + y) as u8])
    });
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).expect("png encodes");
    out.into_inner()
}

fn one_hot(label: &str) -> serde_json::Value {
    serde_json::json!({ label: 1.0 })
}

fn write_labels(dir: &Path, png: &[u8], scene: serde_json::Value, building: BuildingClass) -> io::Result<()> {
    let digest = hex::encode(Sha256::digest(png));
    let body = serde_json::json!({ "scene": scene, "building": one_hot(building.as_str()) });
    fs::write(
        dir.join(format!("{digest}.labels.json")),
        serde_json::to_vec_pretty(&body).expect("labels serialize"),
    )
}

fn metadata_ok(pano: &str, lat: f64, lon: f64) -> Vec<u8> {
    serde_json::to_vec(&serde_json::json!({
        "status": "OK",
        "pano_id": pano,
        "location": { "lat": lat, "lng": lon },
    }))
    .expect("metadata serializes")
}

fn metadata_status(status: &str) -> Vec<u8> {
    serde_json::to_vec(&serde_json::json!({ "status": status })).expect("metadata serializes")
}

/// Writes the fixture under `root` and returns its paths and plan.
pub fn generate(root: &Path) -> io::Result<SyntheticCity> {
    let osm = root.join("city.osm");
    let replay_dir = root.join("replay");
    let labels_dir = root.join("labels");
    fs::create_dir_all(&replay_dir)?;
    fs::create_dir_all(&labels_dir)?;

    let mut xml = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<osm version=\"0.6\" generator=\"bic-testkit\">\n");
    let mut ways = String::new();
    let mut planned = Vec::with_capacity(BUILDINGS);
    let mut node_id = 1_i64;
    let (mut south, mut west, mut north, mut east) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);

    for i in 0..BUILDINGS {
        let class = BuildingClass::ALL[i % BuildingClass::ALL.len()];
        let (row, col) = (i / COLUMNS, i % COLUMNS);
        let lat = ORIGIN.0 + row as f64 * SPACING_DEG;
        let lon = ORIGIN.1 + col as f64 * SPACING_DEG;
        // corners as they will be read back from the XML
        let lats = [lat - HALF_LAT, lat + HALF_LAT].map(|v| coord(v).parse::<f64>().unwrap());
        let lons = [lon - HALF_LON, lon + HALF_LON].map(|v| coord(v).parse::<f64>().unwrap());
        let corners = [(lats[0], lons[0]), (lats[0], lons[1]), (lats[1], lons[1]), (lats[1], lons[0])];
        let first = node_id;
        for (la, lo) in corners {
            writeln!(xml, "  <node id=\"{node_id}\" lat=\"{}\" lon=\"{}\"/>", coord(la), coord(lo)).unwrap();
            node_id += 1;
            south = south.min(la);
            north = north.max(la);
            west = west.min(lo);
            east = east.max(lo);
        }
        let id = 1000 + 7 * i as i64;
        writeln!(ways, "  <way id=\"{id}\">").unwrap();
        for n in (first..node_id).chain([first]) {
            writeln!(ways, "    <nd ref=\"{n}\"/>").unwrap();
        }
        writeln!(ways, "    <tag k=\"building\" v=\"{}\"/>\n  </way>", tag_for(class)).unwrap();

        // a rectangle's area centroid is its centre
        let centroid = ((lats[0] + lats[1]) / 2.0, (lons[0] + lons[1]) / 2.0);
        let (outcome, shots) = shots_for(i);
        planned.push(PlannedBuilding {
            id,
            class,
            centroid,
            outcome,
            shots,
        });
    }

    // an unclosed building outline and a road; neither yields a record
    let extra = node_id;
    for k in 0..3 {
        let la = ORIGIN.0 - 0.001;
        let lo = ORIGIN.1 + 0.0005 * k as f64;
        writeln!(xml, "  <node id=\"{}\" lat=\"{}\" lon=\"{}\"/>", extra + k, coord(la), coord(lo)).unwrap();
    }
    writeln!(
        ways,
        "  <way id=\"90001\">\n    <nd ref=\"{}\"/>\n    <nd ref=\"{}\"/>\n    <nd ref=\"{}\"/>\n    <tag k=\"building\" v=\"house\"/>\n  </way>",
        extra,
        extra + 1,
        extra + 2
    )
    .unwrap();
    writeln!(
        ways,
        "  <way id=\"90002\">\n    <nd ref=\"{}\"/>\n    <nd ref=\"{}\"/>\n    <tag k=\"highway\" v=\"residential\"/>\n  </way>",
        extra,
        extra + 2
    )
    .unwrap();
    xml.push_str(&ways);
    xml.push_str("</osm>\n");
    fs::write(&osm, &xml)?;

    // viewpoint URLs must match what the fetcher will request, so derive
    // them from the parsed records
    let (records, _) = parse_osm(xml.as_bytes(), None, &TagMapping::default())
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
    let params = ViewpointParams::default();
    let mut plan = CityPlan {
        buildings: Vec::new(),
        bbox: BoundingBox::new(south, west, north, east),
        image_entries: 0,
        metadata_entries: 0,
        images_fetched: 0,
        images_kept: 0,
        images_rejected: 0,
        duplicate_panos: 0,
        no_pano: 0,
        failed: 0,
        predictions: 0,
        unclassified_no_imagery: 0,
        unclassified_all_filtered: 0,
        class_counts: BTreeMap::new(),
    };

    for (i, b) in planned.iter().enumerate() {
        let record = records
            .iter()
            .find(|r| r.id == b.id)
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, format!("way {} not parsed", b.id)))?;
        let viewpoints = sample_viewpoints(record, &params)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        let mut previous_pano = None;
        for (j, (v, shot)) in viewpoints.iter().zip(&b.shots).enumerate() {
            let meta_url = build_metadata_request(v, "");
            plan.metadata_entries += 1;
            let pano = format!("pano-{}-{j}", b.id);
            let (lat, lon) = (v.location.lat(), v.location.lon());
            match shot {
                Shot::ZeroResults => {
                    ReplayTransport::record(&replay_dir, &meta_url, 200, &metadata_status("ZERO_RESULTS"))?;
                    plan.no_pano += 1;
                    continue;
                }
                Shot::NotFound => {
                    ReplayTransport::record(&replay_dir, &meta_url, 200, &metadata_status("NOT_FOUND"))?;
                    plan.no_pano += 1;
                    continue;
                }
                Shot::MetadataError => {
                    ReplayTransport::record(&replay_dir, &meta_url, 500, b"internal error")?;
                    plan.failed += 1;
                    continue;
                }
                Shot::Duplicate => {
                    let same: &String = previous_pano.as_ref().expect("duplicate follows a panorama");
                    ReplayTransport::record(&replay_dir, &meta_url, 200, &metadata_ok(same, lat, lon))?;
                    plan.duplicate_panos += 1;
                    continue;
                }
                _ => {
                    ReplayTransport::record(&replay_dir, &meta_url, 200, &metadata_ok(&pano, lat, lon))?;
                    previous_pano = Some(pano);
                }
            }
            let image_url = build_image_request(v, "");
            plan.image_entries += 1;
            if *shot == Shot::ImageError {
                ReplayTransport::record(&replay_dir, &image_url, 500, b"internal error")?;
                plan.failed += 1;
                continue;
            }
            let png = unique_png(i, j);
            ReplayTransport::record(&replay_dir, &image_url, 200, &png)?;
            plan.images_fetched += 1;
            let (scene, building) = match shot {
                Shot::Kept => (one_hot(KEPT_SCENES[(i + j) % KEPT_SCENES.len()]), b.class),
                Shot::KeptTie => (serde_json::json!({ "house": 0.5, "restaurant": 0.5 }), b.class),
                Shot::Outlier => (one_hot(OUTLIER_SCENES[(i + j) % OUTLIER_SCENES.len()]), wrong_class(b.class)),
                _ => unreachable!("non-image shots handled above"),
            };
            if *shot == Shot::Outlier {
                plan.images_rejected += 1;
            } else {
                plan.images_kept += 1;
            }
            write_labels(&labels_dir, &png, scene, building)?;
        }
        match b.outcome {
            Outcome::Classified => {
                plan.predictions += 1;
                *plan.class_counts.entry(b.class).or_default() += 1;
            }
            Outcome::NoImagery => plan.unclassified_no_imagery += 1,
            Outcome::AllFiltered => plan.unclassified_all_filtered += 1,
        }
    }
    plan.buildings = planned;

    fs::write(
        root.join("plan.json"),
        serde_json::to_vec_pretty(&plan).expect("plan serializes"),
    )?;
    Ok(SyntheticCity {
        root: root.to_path_buf(),
        osm,
        replay_dir,
        labels_dir,
        plan,
    })
}
