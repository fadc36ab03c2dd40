use serde::{Deserialize, Serialize};

use crate::geo::{destination_point, initial_bearing, GeoError, GeoPoint};
use crate::osm::BuildingRecord;

pub const IMAGE_ENDPOINT: &str = "https://maps.googleapis.com/maps/api/streetview";
pub const METADATA_ENDPOINT: &str = "https://maps.googleapis.com/maps/api/streetview/metadata";

pub const DEFAULT_PITCH: f64 = 10.0;
pub const DEFAULT_IMAGE_SIZE: u32 = 512;
pub const DEFAULT_FOV: f64 = 90.0;

/// Camera placement and image parameters for one street-view request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewpointSpec {
    pub location: GeoPoint,
    pub heading: f64,
    pub pitch: f64,
    pub width: u32,
    pub height: u32,
    pub fov: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ViewpointError {
    #[error("heading {0} outside [0, 360)")]
    Heading(f64),
    #[error("pitch {0} outside [-90, 90]")]
    Pitch(f64),
    #[error("image size must be positive")]
    Size,
    #[error("fov {0} outside (0, 120]")]
    Fov(f64),
}

impl ViewpointSpec {
    pub fn new(location: GeoPoint, heading: f64) -> Self {
        ViewpointSpec {
            location,
            heading,
            pitch: DEFAULT_PITCH,
            width: DEFAULT_IMAGE_SIZE,
            height: DEFAULT_IMAGE_SIZE,
            fov: DEFAULT_FOV,
        }
    }

    pub fn validate(&self) -> Result<(), ViewpointError> {
        if !(0.0..360.0).contains(&self.heading) {
            return Err(ViewpointError::Heading(self.heading));
        }
        if !(-90.0..=90.0).contains(&self.pitch) {
            return Err(ViewpointError::Pitch(self.pitch));
        }
        if self.width == 0 || self.height == 0 {
            return Err(ViewpointError::Size);
        }
        if !(self.fov > 0.0 && self.fov <= 120.0) {
            return Err(ViewpointError::Fov(self.fov));
        }
        Ok(())
    }

    /// Heading rounded to whole degrees in `[0, 360)`; names the cached image.
    pub fn heading_key(&self) -> u32 {
        (self.heading.round() as u32) % 360
    }
}

/// How viewpoints are laid out around a footprint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewpointParams {
    pub count: usize,
    pub offset_m: f64,
    pub pitch: f64,
    pub width: u32,
    pub height: u32,
    pub fov: f64,
}

impl Default for ViewpointParams {
    fn default() -> Self {
        ViewpointParams {
            count: 4,
            offset_m: 30.0,
            pitch: DEFAULT_PITCH,
            width: DEFAULT_IMAGE_SIZE,
            height: DEFAULT_IMAGE_SIZE,
            fov: DEFAULT_FOV,
        }
    }
}

/// Places `params.count` cameras on a circle of radius `params.offset_m`
/// around the footprint centroid, at equally spaced azimuths starting due
/// north, each looking back at the centroid.
pub fn sample_viewpoints(
    building: &BuildingRecord,
    params: &ViewpointParams,
) -> Result<Vec<ViewpointSpec>, GeoError> {
    let centroid = building.footprint.centroid();
    let k = params.count.max(1);
    (0..k)
        .map(|i| {
            let azimuth = 360.0 * i as f64 / k as f64;
            let location = destination_point(centroid, azimuth, params.offset_m);
            let heading = initial_bearing(location, centroid)?;
            Ok(ViewpointSpec {
                location,
                heading,
                pitch: params.pitch,
                width: params.width,
                height: params.height,
                fov: params.fov,
            })
        })
        .collect()
}

fn fixed(value: f64, decimals: usize) -> String {
    let s = format!("{value:.decimals$}");
    // "-0.000000" and "0.000000" must key the same request
    if s.starts_with('-') && s[1..].bytes().all(|b| b == b'0' || b == b'.') {
        s[1..].to_string()
    } else {
        s
    }
}

fn heading_param(heading: f64) -> String {
    let h = fixed(heading, 1);
    if h == "360.0" {
        "0.0".to_string()
    } else {
        h
    }
}

fn encode_key(key: &str) -> String {
    let mut out = String::with_capacity(key.len());
    for b in key.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b'~') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

fn query(v: &ViewpointSpec, api_key: &str) -> String {
    format!(
        "size={}x{}&location={},{}&heading={}&pitch={}&fov={}&key={}",
        v.width,
        v.height,
        fixed(v.location.lat(), 6),
        fixed(v.location.lon(), 6),
        heading_param(v.heading),
        fixed(v.pitch, 1),
        fixed(v.fov, 1),
        encode_key(api_key),
    )
}

/// Static image URL. Parameter order and number formatting are fixed so the
/// string can key caches and replay archives.
pub fn build_image_request(v: &ViewpointSpec, api_key: &str) -> String {
    format!("{IMAGE_ENDPOINT}?{}", query(v, api_key))
}

/// Metadata URL for the same viewpoint.
pub fn build_metadata_request(v: &ViewpointSpec, api_key: &str) -> String {
    format!("{METADATA_ENDPOINT}?{}", query(v, api_key))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::FootprintPolygon;

    fn building_at(lat: f64, lon: f64) -> BuildingRecord {
        let d = 0.0001;
        BuildingRecord {
            id: 1,
            footprint: FootprintPolygon::from_lat_lon(&[
                (lat - d, lon - d),
                (lat - d, lon + d),
                (lat + d, lon + d),
                (lat + d, lon - d),
                (lat - d, lon - d),
            ])
            .unwrap(),
            truth_label: None,
            raw_tag: "yes".into(),
        }
    }

    fn angle_diff(a: f64, b: f64) -> f64 {
        ((a - b + 540.0).rem_euclid(360.0) - 180.0).abs()
    }

    #[test]
    fn default_request_url() {
        let v = ViewpointSpec::new(GeoPoint::new(40.0, -75.0).unwrap(), 90.0);
        assert_eq!(
            build_image_request(&v, "K"),
            "https://maps.googleapis.com/maps/api/streetview?size=512x512&location=40.000000,-75.000000&heading=90.0&pitch=10.0&fov=90.0&key=K"
        );
        assert_eq!(build_image_request(&v, "K"), build_image_request(&v, "K"));
        assert!(build_metadata_request(&v, "K")
            .starts_with("https://maps.googleapis.com/maps/api/streetview/metadata?size=512x512&"));
    }

    #[test]
    fn url_rounding_rules() {
        let v = ViewpointSpec::new(GeoPoint::new(40.0000004, -0.00000001).unwrap(), 359.97);
        let url = build_image_request(&v, "a b");
        assert!(url.contains("location=40.000000,0.000000&"), "{url}");
        assert!(url.contains("heading=0.0&"), "{url}");
        assert!(url.ends_with("key=a%20b"));
    }

    #[test]
    fn single_viewpoint_is_north_looking_south() {
        let b = building_at(51.05, -114.07);
        let params = ViewpointParams {
            count: 1,
            ..Default::default()
        };
        let vs = sample_viewpoints(&b, &params).unwrap();
        assert_eq!(vs.len(), 1);
        let c = b.footprint.centroid();
        assert!(vs[0].location.lat() > c.lat());
        assert!((vs[0].location.lon() - c.lon()).abs() < 1e-9);
        assert!(angle_diff(vs[0].heading, 180.0) < 1e-6);
        assert_eq!(vs[0].pitch, 10.0);
        assert_eq!((vs[0].width, vs[0].height), (512, 512));
        assert_eq!(vs[0].fov, 90.0);
    }

    #[test]
    fn four_viewpoints_face_centroid() {
        let b = building_at(51.05, -114.07);
        let vs = sample_viewpoints(&b, &ViewpointParams::default()).unwrap();
        let expected = [180.0, 270.0, 0.0, 90.0];
        for (v, e) in vs.iter().zip(expected) {
            assert!(angle_diff(v.heading, e) < 0.5, "{} vs {e}", v.heading);
            v.validate().unwrap();
            let d = crate::geo::haversine_distance(v.location, b.footprint.centroid());
            assert!((d - 30.0).abs() < 1e-6);
        }
    }

    #[test]
    fn validate_rejects_bad_specs() {
        let p = GeoPoint::new(0.0, 0.0).unwrap();
        let mut v = ViewpointSpec::new(p, 360.0);
        assert_eq!(v.validate(), Err(ViewpointError::Heading(360.0)));
        v.heading = 0.0;
        v.pitch = 91.0;
        assert!(v.validate().is_err());
        v.pitch = 10.0;
        v.width = 0;
        assert_eq!(v.validate(), Err(ViewpointError::Size));
    }
}
