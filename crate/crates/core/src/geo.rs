//! Geodetic primitives on a spherical Earth model.
//!
//! Distances and bearings use the haversine/great-circle formulas. Footprint
//! area and centroid are computed in a local equirectangular projection about
//! the ring's mean vertex, which is accurate for building-sized polygons.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius in meters (IUGG).
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Footprints whose projected area falls below this (in m²) are degenerate.
const MIN_AREA_M2: f64 = 1e-10;

/// Planar tolerance, in degrees, for the point-on-edge test.
const EDGE_EPS_DEG: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeoError {
    #[error("invalid coordinate (lat {lat}, lon {lon})")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("bearing is undefined between coincident points")]
    CoincidentPoints,
    #[error("ring must have at least 4 points with 3 distinct vertices, got {0} points")]
    TooFewPoints(usize),
    #[error("ring is not closed (first point differs from last)")]
    UnclosedRing,
    #[error("polygon area is degenerate")]
    DegeneratePolygon,
}

/// A WGS84 latitude/longitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint", into = "RawPoint")]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPoint {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawPoint> for GeoPoint {
    type Error = GeoError;
    fn try_from(raw: RawPoint) -> Result<Self, GeoError> {
        GeoPoint::new(raw.lat, raw.lon)
    }
}

impl From<GeoPoint> for RawPoint {
    fn from(p: GeoPoint) -> Self {
        RawPoint { lat: p.lat, lon: p.lon }
    }
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        let valid = lat.is_finite()
            && lon.is_finite()
            && (-90.0..=90.0).contains(&lat)
            && (-180.0..=180.0).contains(&lon);
        if valid {
            Ok(GeoPoint { lat, lon })
        } else {
            Err(GeoError::InvalidCoordinate { lat, lon })
        }
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    /// `[lon, lat]`, the GeoJSON position order.
    pub fn lon_lat(&self) -> [f64; 2] {
        [self.lon, self.lat]
    }
}

/// Great-circle distance in meters.
pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();

    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Initial great-circle bearing from `from` towards `to`, in degrees clockwise
/// from north, normalized to `[0, 360)`.
pub fn initial_bearing(from: GeoPoint, to: GeoPoint) -> Result<f64, GeoError> {
    if from == to {
        return Err(GeoError::CoincidentPoints);
    }
    let phi1 = from.lat.to_radians();
    let phi2 = to.lat.to_radians();
    let dlambda = (to.lon - from.lon).to_radians();

    let y = dlambda.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * dlambda.cos();
    Ok(normalize_degrees(y.atan2(x).to_degrees()))
}

/// Point reached by travelling `distance` meters from `origin` along the
/// great circle with initial bearing `bearing_deg`.
pub fn destination_point(origin: GeoPoint, bearing_deg: f64, distance: f64) -> GeoPoint {
    let delta = distance / EARTH_RADIUS_M;
    let theta = bearing_deg.to_radians();
    let phi1 = origin.lat.to_radians();
    let lambda1 = origin.lon.to_radians();

    let sin_phi2 = phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * theta.cos();
    let phi2 = sin_phi2.clamp(-1.0, 1.0).asin();
    let lambda2 = lambda1
        + (theta.sin() * delta.sin() * phi1.cos()).atan2(delta.cos() - phi1.sin() * sin_phi2);

    let lon = (lambda2.to_degrees() + 540.0).rem_euclid(360.0) - 180.0;
    GeoPoint {
        lat: phi2.to_degrees().clamp(-90.0, 90.0),
        lon,
    }
}

pub(crate) fn normalize_degrees(deg: f64) -> f64 {
    let d = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if d >= 360.0 {
        0.0
    } else {
        d
    }
}

/// A closed building outline.
#[derive(Debug, Clone, PartialEq)]
pub struct FootprintPolygon {
    ring: Vec<GeoPoint>,
    area_m2: f64,
    centroid: GeoPoint,
}

impl FootprintPolygon {
    /// Validates the ring (explicitly closed, ≥ 3 distinct vertices, nonzero
    /// area) and derives area and centroid.
    pub fn new(ring: Vec<GeoPoint>) -> Result<Self, GeoError> {
        if ring.len() < 4 {
            return Err(GeoError::TooFewPoints(ring.len()));
        }
        if ring.first() != ring.last() {
            return Err(GeoError::UnclosedRing);
        }
        let open = &ring[..ring.len() - 1];
        let mut distinct: Vec<(u64, u64)> = open
            .iter()
            .map(|p| (p.lat.to_bits(), p.lon.to_bits()))
            .collect();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 3 {
            return Err(GeoError::TooFewPoints(ring.len()));
        }

        let (area_m2, centroid) = planar_area_centroid(open)?;
        Ok(FootprintPolygon {
            ring,
            area_m2,
            centroid,
        })
    }

    pub fn from_lat_lon(coords: &[(f64, f64)]) -> Result<Self, GeoError> {
        let ring = coords
            .iter()
            .map(|&(lat, lon)| GeoPoint::new(lat, lon))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(ring)
    }

    pub fn ring(&self) -> &[GeoPoint] {
        &self.ring
    }

    /// Unsigned area in square meters.
    pub fn area(&self) -> f64 {
        self.area_m2
    }

    pub fn centroid(&self) -> GeoPoint {
        self.centroid
    }
}

/// Area-weighted centroid of a valid footprint.
pub fn polygon_centroid(poly: &FootprintPolygon) -> GeoPoint {
    poly.centroid()
}

/// Shoelace area and centroid in an equirectangular projection about the
/// mean vertex. `open` excludes the closing point.
fn planar_area_centroid(open: &[GeoPoint]) -> Result<(f64, GeoPoint), GeoError> {
    let n = open.len() as f64;
    let lat0 = open.iter().map(|p| p.lat).sum::<f64>() / n;
    let lon0 = open.iter().map(|p| p.lon).sum::<f64>() / n;

    let m_per_deg = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
    let kx = m_per_deg * lat0.to_radians().cos();
    let ky = m_per_deg;
    let project = |p: &GeoPoint| ((p.lon - lon0) * kx, (p.lat - lat0) * ky);

    let mut twice_area = 0.0;
    let mut cx = 0.0;
    let mut cy = 0.0;
    for (i, p) in open.iter().enumerate() {
        let (x0, y0) = project(p);
        let (x1, y1) = project(&open[(i + 1) % open.len()]);
        let cross = x0 * y1 - x1 * y0;
        twice_area += cross;
        cx += (x0 + x1) * cross;
        cy += (y0 + y1) * cross;
    }
    let area = twice_area / 2.0;
    if !area.is_finite() || area.abs() < MIN_AREA_M2 || kx.abs() < f64::EPSILON {
        return Err(GeoError::DegeneratePolygon);
    }
    cx /= 6.0 * area;
    cy /= 6.0 * area;

    let centroid = GeoPoint::new(lat0 + cy / ky, lon0 + cx / kx)?;
    Ok((area.abs(), centroid))
}

/// Even-odd ray casting in the lon/lat plane. Points on an edge or vertex
/// count as inside.
pub fn point_in_polygon(p: GeoPoint, poly: &FootprintPolygon) -> bool {
    let ring = poly.ring();
    let (px, py) = (p.lon, p.lat);

    for w in ring.windows(2) {
        if on_segment(px, py, w[0].lon, w[0].lat, w[1].lon, w[1].lat) {
            return true;
        }
    }

    let mut inside = false;
    for w in ring.windows(2) {
        let (xi, yi) = (w[0].lon, w[0].lat);
        let (xj, yj) = (w[1].lon, w[1].lat);
        if (yi > py) != (yj > py) {
            let x_cross = xi + (py - yi) * (xj - xi) / (yj - yi);
            if px < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

fn on_segment(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> bool {
    let (dx, dy) = (bx - ax, by - ay);
    let len = dx.hypot(dy);
    let cross = dx * (py - ay) - dy * (px - ax);
    if cross.abs() > EDGE_EPS_DEG * len.max(1.0) {
        return false;
    }
    px >= ax.min(bx) - EDGE_EPS_DEG
        && px <= ax.max(bx) + EDGE_EPS_DEG
        && py >= ay.min(by) - EDGE_EPS_DEG
        && py <= ay.max(by) + EDGE_EPS_DEG
}

/// Latitude/longitude bounds, inclusive on every edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub south: f64,
    pub west: f64,
    pub north: f64,
    pub east: f64,
}

impl BoundingBox {
    pub fn new(south: f64, west: f64, north: f64, east: f64) -> Self {
        BoundingBox {
            south,
            west,
            north,
            east,
        }
    }

    /// Smallest box containing every point, `None` for no points.
    pub fn enclosing<I: IntoIterator<Item = GeoPoint>>(points: I) -> Option<Self> {
        points.into_iter().fold(None, |acc, p| {
            Some(match acc {
                None => BoundingBox::new(p.lat, p.lon, p.lat, p.lon),
                Some(b) => BoundingBox::new(
                    b.south.min(p.lat),
                    b.west.min(p.lon),
                    b.north.max(p.lat),
                    b.east.max(p.lon),
                ),
            })
        })
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.south..=self.north).contains(&p.lat) && (self.west..=self.east).contains(&p.lon)
    }

    /// True when the box has no interior.
    pub fn is_empty(&self) -> bool {
        !(self.south < self.north && self.west < self.east)
    }
}

impl std::str::FromStr for BoundingBox {
    type Err = String;

    /// Parses `S,W,N,E`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("invalid bbox `{s}`: {e}"))?;
        match parts.as_slice() {
            &[south, west, north, east] => Ok(BoundingBox::new(south, west, north, east)),
            _ => Err(format!("bbox `{s}` must have four values S,W,N,E")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    fn unit_square() -> FootprintPolygon {
        FootprintPolygon::from_lat_lon(&[(0.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, 0.0), (0.0, 0.0)])
            .unwrap()
    }

    #[test]
    fn rejects_out_of_range_and_nan() {
        assert!(GeoPoint::new(90.5, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -180.1).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
        assert!(GeoPoint::new(-90.0, 180.0).is_ok());
    }

    #[test]
    fn haversine_identity_and_equator_degree() {
        assert_eq!(haversine_distance(pt(0.0, 0.0), pt(0.0, 0.0)), 0.0);
        // closed form: R * pi / 180
        let expected = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        let d = haversine_distance(pt(0.0, 0.0), pt(0.0, 1.0));
        assert!((d - expected).abs() < 1e-6);
        assert_eq!(d.round(), 111_195.0);
    }

    #[test]
    fn haversine_antipodal_symmetric() {
        let a = haversine_distance(pt(0.0, 0.0), pt(0.0, 180.0));
        let b = haversine_distance(pt(0.0, 180.0), pt(0.0, 0.0));
        assert_eq!(a, b);
        assert!((a - EARTH_RADIUS_M * std::f64::consts::PI).abs() < 1e-6);
    }

    #[test]
    fn bearing_cardinal_directions() {
        assert_eq!(initial_bearing(pt(0.0, 0.0), pt(1.0, 0.0)).unwrap(), 0.0);
        assert!((initial_bearing(pt(0.0, 0.0), pt(0.0, 1.0)).unwrap() - 90.0).abs() < 1e-12);
        assert!((initial_bearing(pt(0.0, 0.0), pt(-1.0, 0.0)).unwrap() - 180.0).abs() < 1e-12);
        assert!((initial_bearing(pt(0.0, 0.0), pt(0.0, -1.0)).unwrap() - 270.0).abs() < 1e-12);
    }

    #[test]
    fn bearing_munich_northwest() {
        // Hand evaluation of atan2(sin dλ cos φ2, cos φ1 sin φ2 − sin φ1 cos φ2 cos dλ)
        // gives 303.0631°.
        let b = initial_bearing(pt(48.1374, 11.5755), pt(48.1450, 11.5580)).unwrap();
        assert!((b - 303.0631).abs() < 1e-3, "{b}");
    }

    #[test]
    fn bearing_coincident_is_error() {
        assert_eq!(
            initial_bearing(pt(10.0, 10.0), pt(10.0, 10.0)),
            Err(GeoError::CoincidentPoints)
        );
    }

    #[test]
    fn destination_round_trips_distance_and_bearing() {
        let origin = pt(51.05, -114.07);
        for bearing in [0.0, 45.0, 90.0, 200.0, 359.0] {
            let dest = destination_point(origin, bearing, 30.0);
            assert!((haversine_distance(origin, dest) - 30.0).abs() < 1e-6);
            let back = initial_bearing(origin, dest).unwrap();
            let diff = (back - bearing + 540.0).rem_euclid(360.0) - 180.0;
            assert!(diff.abs() < 1e-6, "{bearing} vs {back}");
        }
    }

    #[test]
    fn centroid_of_square_and_triangle() {
        let c = unit_square().centroid();
        assert!((c.lat() - 0.5).abs() < 1e-9 && (c.lon() - 0.5).abs() < 1e-9);

        let tri =
            FootprintPolygon::from_lat_lon(&[(0.0, 0.0), (0.0, 3.0), (3.0, 0.0), (0.0, 0.0)]).unwrap();
        let c = polygon_centroid(&tri);
        assert!((c.lat() - 1.0).abs() < 1e-9 && (c.lon() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn polygon_validation() {
        assert_eq!(
            FootprintPolygon::from_lat_lon(&[(0.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, 0.0)]),
            Err(GeoError::UnclosedRing)
        );
        assert!(matches!(
            FootprintPolygon::from_lat_lon(&[(0.0, 0.0), (0.0, 1.0), (0.0, 0.0)]),
            Err(GeoError::TooFewPoints(3))
        ));
        assert!(matches!(
            FootprintPolygon::from_lat_lon(&[(0.0, 0.0), (0.0, 1.0), (0.0, 1.0), (0.0, 0.0)]),
            Err(GeoError::TooFewPoints(_))
        ));
        // collinear
        assert_eq!(
            FootprintPolygon::from_lat_lon(&[(0.0, 0.0), (0.0, 1.0), (0.0, 2.0), (0.0, 0.0)]),
            Err(GeoError::DegeneratePolygon)
        );
    }

    #[test]
    fn square_area_matches_projection() {
        // a ~10 m square near Calgary
        let d = 10.0 / (EARTH_RADIUS_M * std::f64::consts::PI / 180.0);
        let lat: f64 = 51.0;
        let dlon = d / lat.to_radians().cos();
        let poly = FootprintPolygon::from_lat_lon(&[
            (lat, 0.0),
            (lat, dlon),
            (lat + d, dlon),
            (lat + d, 0.0),
            (lat, 0.0),
        ])
        .unwrap();
        assert!((poly.area() - 100.0).abs() < 0.01, "{}", poly.area());
    }

    #[test]
    fn point_in_unit_square() {
        let sq = unit_square();
        assert!(point_in_polygon(pt(0.5, 0.5), &sq));
        assert!(!point_in_polygon(pt(2.0, 2.0), &sq));
        assert!(point_in_polygon(pt(0.0, 0.5), &sq));
        assert!(point_in_polygon(pt(1.0, 1.0), &sq));
        assert!(!point_in_polygon(pt(0.5, 1.0 + 1e-9), &sq));
    }

    #[test]
    fn bbox_parse_and_contains() {
        let b: BoundingBox = "50.9, -114.2, 51.2, -113.9".parse().unwrap();
        assert!(b.contains(pt(51.0, -114.0)));
        assert!(b.contains(pt(51.2, -113.9)));
        assert!(!b.contains(pt(51.3, -114.0)));
        assert!("1,2,3".parse::<BoundingBox>().is_err());
        assert!(BoundingBox::new(1.0, 0.0, 1.0, 2.0).is_empty());
    }

    #[test]
    fn point_in_concave_polygon() {
        // U shape opening north
        let u = FootprintPolygon::from_lat_lon(&[
            (0.0, 0.0),
            (0.0, 3.0),
            (3.0, 3.0),
            (3.0, 2.0),
            (1.0, 2.0),
            (1.0, 1.0),
            (3.0, 1.0),
            (3.0, 0.0),
            (0.0, 0.0),
        ])
        .unwrap();
        assert!(!point_in_polygon(pt(2.0, 1.5), &u));
        assert!(point_in_polygon(pt(2.0, 0.5), &u));
        assert!(point_in_polygon(pt(0.5, 1.5), &u));
    }
}
