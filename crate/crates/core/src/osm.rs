//! OSM XML ingest: closed `building=*` ways become [`BuildingRecord`]s.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::path::Path;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};

use crate::class::BuildingClass;
use crate::geo::{BoundingBox, FootprintPolygon, GeoError, GeoPoint};
use crate::jsonl::{self, JsonlError};

#[derive(Debug, thiserror::Error)]
pub enum OsmError {
    #[error("malformed OSM XML at byte {position}: {message}")]
    MalformedXml { position: u64, message: String },
}

/// Ground-truth mapping from OSM `building=*` values to classes.
pub fn map_tag_to_class(raw_tag: &str) -> Option<BuildingClass> {
    let tag = raw_tag.trim().to_ascii_lowercase();
    let class = match tag.as_str() {
        "apartments" => BuildingClass::Apartment,
        "church" => BuildingClass::Church,
        "garage" | "garages" => BuildingClass::Garage,
        "house" => BuildingClass::House,
        "industrial" => BuildingClass::Industrial,
        "office" => BuildingClass::OfficeBuilding,
        "retail" => BuildingClass::Retail,
        "roof" => BuildingClass::Roof,
        _ => return None,
    };
    Some(class)
}

/// The fixed tag table plus optional configured extensions
/// (e.g. `detached -> house`). Extensions never override the fixed table.
#[derive(Debug, Clone, Default)]
pub struct TagMapping {
    extra: BTreeMap<String, BuildingClass>,
}

impl TagMapping {
    pub fn with_extra(extra: &BTreeMap<String, BuildingClass>) -> Self {
        TagMapping {
            extra: extra
                .iter()
                .map(|(k, v)| (k.trim().to_ascii_lowercase(), *v))
                .collect(),
        }
    }

    pub fn map(&self, raw_tag: &str) -> Option<BuildingClass> {
        map_tag_to_class(raw_tag)
            .or_else(|| self.extra.get(&raw_tag.trim().to_ascii_lowercase()).copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildingRecord {
    pub id: i64,
    pub footprint: FootprintPolygon,
    pub truth_label: Option<BuildingClass>,
    pub raw_tag: String,
}

/// Counters describing what a parse kept and why ways were dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub parsed: usize,
    pub labeled: usize,
    pub unmapped: usize,
    pub skipped_unclosed: usize,
    pub skipped_unresolved: usize,
    pub skipped_invalid: usize,
    pub skipped_outside_bbox: usize,
    pub skipped_relations: usize,
    pub duplicate_ids: usize,
    /// Unmapped `building=*` values and how often each occurred.
    pub unmapped_tags: BTreeMap<String, usize>,
}

#[derive(Default)]
struct WayDraft {
    id: i64,
    refs: Vec<i64>,
    building: Option<String>,
}

enum Open {
    None,
    Way(WayDraft),
    Relation { building: bool, multipolygon: bool },
}

/// Parses an OSM XML stream. Nodes may appear after the ways referencing
/// them; resolution happens once the document has been read.
pub fn parse_osm<R: BufRead>(
    input: R,
    bbox: Option<BoundingBox>,
    mapping: &TagMapping,
) -> Result<(Vec<BuildingRecord>, ParseReport), OsmError> {
    let mut reader = Reader::from_reader(input);
    reader.config_mut().trim_text(true);

    let mut nodes: HashMap<i64, GeoPoint> = HashMap::new();
    let mut ways: Vec<WayDraft> = Vec::new();
    let mut report = ParseReport::default();
    let mut open = Open::None;
    let mut buf = Vec::new();
    let mut depth = 0usize;

    loop {
        let event = reader
            .read_event_into(&mut buf)
            .map_err(|e| malformed(&reader, e.to_string()))?;
        match event {
            Event::Start(ref e) | Event::Empty(ref e) => {
                let is_empty = matches!(event, Event::Empty(_));
                if !is_empty {
                    depth += 1;
                }
                match e.name().as_ref() {
                    b"node" => {
                        let id = attr_i64(&reader, e, b"id")?;
                        let lat = attr_f64(&reader, e, b"lat")?;
                        let lon = attr_f64(&reader, e, b"lon")?;
                        // invalid coordinates surface later as unresolved refs
                        if let Ok(p) = GeoPoint::new(lat, lon) {
                            nodes.insert(id, p);
                        }
                    }
                    b"way" => {
                        let draft = WayDraft {
                            id: attr_i64(&reader, e, b"id")?,
                            ..WayDraft::default()
                        };
                        if is_empty {
                            ways.push(draft);
                        } else {
                            open = Open::Way(draft);
                        }
                    }
                    b"relation" if !is_empty => {
                        open = Open::Relation {
                            building: false,
                            multipolygon: false,
                        };
                    }
                    b"nd" => {
                        if let Open::Way(w) = &mut open {
                            w.refs.push(attr_i64(&reader, e, b"ref")?);
                        }
                    }
                    b"tag" => {
                        let k = attr_string(&reader, e, b"k")?;
                        let v = attr_string(&reader, e, b"v")?;
                        match &mut open {
                            Open::Way(w) if k == "building" => w.building = Some(v),
                            Open::Relation {
                                building,
                                multipolygon,
                            } => {
                                if k == "building" {
                                    *building = true;
                                }
                                if k == "type" && v == "multipolygon" {
                                    *multipolygon = true;
                                }
                            }
                            _ => {}
                        }
                    }
                    _ => {}
                }
            }
            Event::End(ref e) => {
                depth = depth.saturating_sub(1);
                match e.name().as_ref() {
                    b"way" => {
                        if let Open::Way(w) = std::mem::replace(&mut open, Open::None) {
                            ways.push(w);
                        }
                    }
                    b"relation" => {
                        if let Open::Relation {
                            building: true,
                            multipolygon: true,
                        } = std::mem::replace(&mut open, Open::None)
                        {
                            report.skipped_relations += 1;
                        }
                    }
                    _ => {}
                }
            }
            Event::Eof => {
                if depth != 0 {
                    return Err(malformed(&reader, "unexpected end of document".into()));
                }
                break;
            }
            _ => {}
        }
        buf.clear();
    }

    let mut records: BTreeMap<i64, BuildingRecord> = BTreeMap::new();
    for way in ways {
        let Some(raw_tag) = way.building else { continue };
        if way.refs.len() < 2 || way.refs.first() != way.refs.last() {
            report.skipped_unclosed += 1;
            continue;
        }
        let Some(ring) = way
            .refs
            .iter()
            .map(|r| nodes.get(r).copied())
            .collect::<Option<Vec<_>>>()
        else {
            report.skipped_unresolved += 1;
            continue;
        };
        let footprint = match FootprintPolygon::new(ring) {
            Ok(f) => f,
            Err(GeoError::UnclosedRing) => {
                report.skipped_unclosed += 1;
                continue;
            }
            Err(_) => {
                report.skipped_invalid += 1;
                continue;
            }
        };
        if let Some(b) = bbox {
            if !b.contains(footprint.centroid()) {
                report.skipped_outside_bbox += 1;
                continue;
            }
        }
        if records.contains_key(&way.id) {
            report.duplicate_ids += 1;
            continue;
        }
        let truth_label = mapping.map(&raw_tag);
        records.insert(
            way.id,
            BuildingRecord {
                id: way.id,
                footprint,
                truth_label,
                raw_tag,
            },
        );
    }

    for r in records.values() {
        report.parsed += 1;
        if r.truth_label.is_some() {
            report.labeled += 1;
        } else {
            report.unmapped += 1;
            *report.unmapped_tags.entry(r.raw_tag.clone()).or_default() += 1;
        }
    }
    Ok((records.into_values().collect(), report))
}

fn malformed<R>(reader: &Reader<R>, message: String) -> OsmError {
    OsmError::MalformedXml {
        position: reader.buffer_position(),
        message,
    }
}

fn attr_string<R>(reader: &Reader<R>, e: &BytesStart, key: &[u8]) -> Result<String, OsmError> {
    for attr in e.attributes() {
        let attr = attr.map_err(|err| malformed(reader, err.to_string()))?;
        if attr.key.as_ref() == key {
            return attr
                .unescape_value()
                .map(|v| v.into_owned())
                .map_err(|err| malformed(reader, err.to_string()));
        }
    }
    Err(malformed(
        reader,
        format!(
            "<{}> is missing attribute `{}`",
            String::from_utf8_lossy(e.name().as_ref()),
            String::from_utf8_lossy(key)
        ),
    ))
}

fn attr_i64<R>(reader: &Reader<R>, e: &BytesStart, key: &[u8]) -> Result<i64, OsmError> {
    let s = attr_string(reader, e, key)?;
    s.trim()
        .parse()
        .map_err(|_| malformed(reader, format!("attribute value `{s}` is not an integer")))
}

fn attr_f64<R>(reader: &Reader<R>, e: &BytesStart, key: &[u8]) -> Result<f64, OsmError> {
    let s = attr_string(reader, e, key)?;
    s.trim()
        .parse()
        .map_err(|_| malformed(reader, format!("attribute value `{s}` is not a number")))
}

/// One line of `buildings.jsonl`. Ring positions are `[lon, lat]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct BuildingLine {
    id: i64,
    ring: Vec<[f64; 2]>,
    raw_tag: String,
    label: Option<BuildingClass>,
}

#[derive(Debug, thiserror::Error)]
pub enum BuildingsFileError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("building {id}: {source}")]
    Geometry {
        id: i64,
        #[source]
        source: GeoError,
    },
}

pub fn write_buildings(path: &Path, records: &[BuildingRecord]) -> Result<(), JsonlError> {
    let lines: Vec<BuildingLine> = records
        .iter()
        .map(|r| BuildingLine {
            id: r.id,
            ring: r.footprint.ring().iter().map(|p| p.lon_lat()).collect(),
            raw_tag: r.raw_tag.clone(),
            label: r.truth_label,
        })
        .collect();
    jsonl::write_all(path, &lines)
}

pub fn read_buildings(path: &Path) -> Result<Vec<BuildingRecord>, BuildingsFileError> {
    let lines: Vec<BuildingLine> = jsonl::read_all(path)?;
    lines
        .into_iter()
        .map(|l| {
            let ring = l
                .ring
                .iter()
                .map(|&[lon, lat]| GeoPoint::new(lat, lon))
                .collect::<Result<Vec<_>, _>>()
                .and_then(FootprintPolygon::new)
                .map_err(|source| BuildingsFileError::Geometry { id: l.id, source })?;
            Ok(BuildingRecord {
                id: l.id,
                footprint: ring,
                truth_label: l.label,
                raw_tag: l.raw_tag,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(xml: &str) -> Result<(Vec<BuildingRecord>, ParseReport), OsmError> {
        parse_osm(xml.as_bytes(), None, &TagMapping::default())
    }

    const FIXTURE: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<osm version="0.6">
  <way id="30">
    <nd ref="1"/><nd ref="2"/><nd ref="3"/><nd ref="4"/><nd ref="1"/>
    <tag k="building" v="house"/>
  </way>
  <node id="1" lat="51.0000" lon="-114.0000"/>
  <node id="2" lat="51.0000" lon="-113.9998"/>
  <node id="3" lat="51.0001" lon="-113.9998"/>
  <node id="4" lat="51.0001" lon="-114.0000"/>
  <node id="5" lat="51.0010" lon="-114.0000"/>
  <node id="6" lat="51.0010" lon="-113.9998"/>
  <node id="7" lat="51.0011" lon="-113.9998"/>
  <node id="8" lat="51.0011" lon="-114.0000">
    <tag k="amenity" v="bench"/>
  </node>
  <way id="10">
    <nd ref="5"/><nd ref="6"/><nd ref="7"/><nd ref="8"/><nd ref="5"/>
    <tag k="building" v="yes"/>
  </way>
  <way id="20">
    <nd ref="1"/><nd ref="2"/><nd ref="6"/><nd ref="1"/>
    <tag k="building" v="Apartments"/>
    <tag k="building:levels" v="5"/>
  </way>
  <way id="40">
    <nd ref="1"/><nd ref="2"/><nd ref="3"/>
    <tag k="building" v="retail"/>
  </way>
  <way id="50">
    <nd ref="1"/><nd ref="2"/><nd ref="3"/><nd ref="1"/>
    <tag k="highway" v="residential"/>
  </way>
  <way id="60">
    <nd ref="1"/><nd ref="99"/><nd ref="3"/><nd ref="1"/>
    <tag k="building" v="garage"/>
  </way>
  <relation id="70">
    <member type="way" ref="10" role="outer"/>
    <tag k="type" v="multipolygon"/>
    <tag k="building" v="church"/>
  </relation>
</osm>"#;

    #[test]
    fn tag_mapping_table() {
        assert_eq!(map_tag_to_class("apartments"), Some(BuildingClass::Apartment));
        assert_eq!(map_tag_to_class("yes"), None);
        assert_eq!(map_tag_to_class("GARAGES "), Some(BuildingClass::Garage));
        assert_eq!(map_tag_to_class("office"), Some(BuildingClass::OfficeBuilding));
        assert_eq!(map_tag_to_class("apartment"), None);
        assert_eq!(map_tag_to_class(""), None);
    }

    #[test]
    fn tag_mapping_extensions() {
        let mut extra = BTreeMap::new();
        extra.insert("Detached".to_string(), BuildingClass::House);
        extra.insert("house".to_string(), BuildingClass::Retail);
        let m = TagMapping::with_extra(&extra);
        assert_eq!(m.map("detached"), Some(BuildingClass::House));
        assert_eq!(m.map("house"), Some(BuildingClass::House));
        assert_eq!(TagMapping::default().map("detached"), None);
    }

    #[test]
    fn parses_fixture() {
        let (records, report) = parse(FIXTURE).unwrap();
        let ids: Vec<i64> = records.iter().map(|r| r.id).collect();
        assert_eq!(ids, vec![10, 20, 30]);
        assert_eq!(records[0].truth_label, None);
        assert_eq!(records[0].raw_tag, "yes");
        assert_eq!(records[1].truth_label, Some(BuildingClass::Apartment));
        assert_eq!(records[2].truth_label, Some(BuildingClass::House));
        assert_eq!(report.parsed, 3);
        assert_eq!(report.labeled, 2);
        assert_eq!(report.unmapped, 1);
        assert_eq!(report.skipped_unclosed, 1);
        assert_eq!(report.skipped_unresolved, 1);
        assert_eq!(report.skipped_relations, 1);
        assert_eq!(report.unmapped_tags.get("yes"), Some(&1));
    }

    #[test]
    fn bbox_filters_on_centroid() {
        let bbox = BoundingBox::new(50.9999, -114.001, 51.0005, -113.999);
        let (records, report) = parse_osm(FIXTURE.as_bytes(), Some(bbox), &TagMapping::default()).unwrap();
        let ids: Vec<i64> = records.iter().map(|r| r.id).collect();
        assert_eq!(ids, vec![20, 30]);
        assert_eq!(report.skipped_outside_bbox, 1);
    }

    #[test]
    fn empty_document() {
        let (records, report) = parse("<osm version=\"0.6\"></osm>").unwrap();
        assert!(records.is_empty());
        assert_eq!(report, ParseReport::default());
        let (records, _) = parse("").unwrap();
        assert!(records.is_empty());
    }

    #[test]
    fn malformed_is_fatal() {
        assert!(matches!(
            parse("<osm><way id=\"1\"></osm>"),
            Err(OsmError::MalformedXml { .. })
        ));
        assert!(matches!(
            parse("<osm><node id=\"x\" lat=\"0\" lon=\"0\"/></osm>"),
            Err(OsmError::MalformedXml { .. })
        ));
        assert!(matches!(parse("<osm><way id=\"1\">"), Err(OsmError::MalformedXml { .. })));
    }

    #[test]
    fn deterministic_and_conserving() {
        let a = parse(FIXTURE).unwrap();
        let b = parse(FIXTURE).unwrap();
        assert_eq!(a, b);
        let (records, _) = a;
        let labeled = records.iter().filter(|r| r.truth_label.is_some()).count();
        let unmapped = records.iter().filter(|r| map_tag_to_class(&r.raw_tag).is_none()).count();
        assert_eq!(labeled + unmapped, records.len());
    }

    #[test]
    fn buildings_file_round_trip() {
        let (records, _) = parse(FIXTURE).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("buildings.jsonl");
        write_buildings(&p, &records).unwrap();
        let back = read_buildings(&p).unwrap();
        assert_eq!(back, records);
        let first = std::fs::read_to_string(&p).unwrap();
        assert!(first.starts_with("{\"id\":10,\"ring\":[[-114.0,51.001]"));
    }
}
