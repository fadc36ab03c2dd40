//! Nearest-neighbor lookup over geo-tagged identifiers.

use crate::geo::{haversine_distance, GeoPoint, EARTH_RADIUS_M};

/// Build-once, query-many point index.
///
/// Entries are kept sorted by latitude. A query walks outward from the query
/// latitude in both directions and stops once the meridional distance alone
/// exceeds the best candidate, since great-circle distance is bounded below
/// by `R * |Δφ|`.
#[derive(Debug, Clone)]
pub struct SpatialIndex<Id> {
    entries: Vec<(GeoPoint, Id)>,
}

impl<Id: Clone + Ord> SpatialIndex<Id> {
    pub fn build<I>(entries: I) -> Self
    where
        I: IntoIterator<Item = (Id, GeoPoint)>,
    {
        let mut entries: Vec<(GeoPoint, Id)> = entries.into_iter().map(|(id, p)| (p, id)).collect();
        entries.sort_by(|a, b| a.0.lat().total_cmp(&b.0.lat()).then_with(|| a.1.cmp(&b.1)));
        SpatialIndex { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Id, GeoPoint)> {
        self.entries.iter().map(|(p, id)| (id, *p))
    }

    /// Closest entry within `max_radius` meters. Equidistant entries resolve
    /// to the smallest identifier.
    pub fn nearest(&self, q: GeoPoint, max_radius: f64) -> Option<(Id, f64)> {
        if self.entries.is_empty() {
            return None;
        }
        let start = self.entries.partition_point(|(p, _)| p.lat() < q.lat());
        let mut best: Option<(usize, f64)> = None;

        let consider = |i: usize, best: &mut Option<(usize, f64)>| -> bool {
            let (p, id) = &self.entries[i];
            let bound = EARTH_RADIUS_M * (p.lat() - q.lat()).to_radians().abs();
            let limit = best.map_or(max_radius, |(_, d)| d.min(max_radius));
            if bound > limit {
                return false;
            }
            let d = haversine_distance(q, *p);
            let better = match *best {
                None => d <= max_radius,
                Some((bi, bd)) => d < bd || (d == bd && *id < self.entries[bi].1),
            };
            if better {
                *best = Some((i, d));
            }
            true
        };

        for i in start..self.entries.len() {
            if !consider(i, &mut best) {
                break;
            }
        }
        for i in (0..start).rev() {
            if !consider(i, &mut best) {
                break;
            }
        }
        best.map(|(i, d)| (self.entries[i].1.clone(), d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn empty_index_has_no_neighbor() {
        let idx: SpatialIndex<u32> = SpatialIndex::build(Vec::new());
        assert!(idx.is_empty());
        assert_eq!(idx.nearest(pt(0.0, 0.0), f64::INFINITY), None);
    }

    #[test]
    fn single_entry_at_query() {
        let idx = SpatialIndex::build(vec![(7u32, pt(51.0, -114.0))]);
        assert_eq!(idx.nearest(pt(51.0, -114.0), 1.0), Some((7, 0.0)));
    }

    #[test]
    fn radius_excludes_far_entries() {
        let idx = SpatialIndex::build(vec![(1u32, pt(0.0, 0.0))]);
        assert_eq!(idx.nearest(pt(0.0, 0.001), 50.0), None);
        assert!(idx.nearest(pt(0.0, 0.001), 200.0).is_some());
    }

    #[test]
    fn ties_resolve_to_smallest_id() {
        let idx = SpatialIndex::build(vec![(9u32, pt(0.0, 0.001)), (3u32, pt(0.0, -0.001))]);
        assert_eq!(idx.nearest(pt(0.0, 0.0), 1e6).unwrap().0, 3);
    }

    #[test]
    fn longitude_far_but_latitude_close_is_pruned_correctly() {
        // same latitude band, very different longitudes; nearest is further in latitude
        let idx = SpatialIndex::build(vec![
            (1u32, pt(10.0, 100.0)),
            (2u32, pt(10.0001, 100.0)),
            (3u32, pt(10.5, 0.0)),
        ]);
        assert_eq!(idx.nearest(pt(10.49, 0.0), f64::INFINITY).unwrap().0, 3);
    }
}
