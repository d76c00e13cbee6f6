//! Geodetic primitives: great-circle distances, point-to-polyline distance and
//! bounding boxes.
//!
//! Coordinates are always `(lon, lat)` in decimal degrees (WGS84), the same
//! order the taxi dataset uses in its polyline column. Be careful when
//! copying coordinates from sources that print `lat, lon`.
//!
//! Segment projection uses an equirectangular plane centred on each segment.
//! At city scale (segments well under 50 km) the position error of the
//! projected foot point is below a few centimetres per kilometre, far under
//! the grounding thresholds used elsewhere in the crate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// IUGG mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Meters per degree of latitude on the mean sphere.
pub const METERS_PER_DEGREE: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("coordinate out of range: lon {lon}, lat {lat}")]
    InvalidCoordinate { lon: f64, lat: f64 },
    #[error("polyline has no points")]
    EmptyPolyline,
    #[error("cannot compute a bounding box of zero points")]
    EmptyPointSet,
    #[error("invalid bounding box: {0}")]
    InvalidBoundingBox(String),
}

/// A WGS84 position, longitude first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    /// Builds a point, rejecting coordinates outside the WGS84 range.
    pub fn new(lon: f64, lat: f64) -> Result<Self, GeoError> {
        let p = GeoPoint { lon, lat };
        if p.is_valid() {
            Ok(p)
        } else {
            Err(GeoError::InvalidCoordinate { lon, lat })
        }
    }

    pub fn is_valid(&self) -> bool {
        self.lon.is_finite()
            && self.lat.is_finite()
            && (-180.0..=180.0).contains(&self.lon)
            && (-90.0..=90.0).contains(&self.lat)
    }
}

impl std::fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({:.4}, {:.4})", self.lon, self.lat)
    }
}

/// Axis-aligned box in degrees. `contains` is inclusive on every edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl BoundingBox {
    pub fn new(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64) -> Result<Self, GeoError> {
        let b = BoundingBox {
            min_lon,
            min_lat,
            max_lon,
            max_lat,
        };
        let corners_ok = GeoPoint { lon: min_lon, lat: min_lat }.is_valid()
            && GeoPoint { lon: max_lon, lat: max_lat }.is_valid();
        if !corners_ok {
            return Err(GeoError::InvalidBoundingBox(format!(
                "corner outside WGS84 range: {min_lon},{min_lat},{max_lon},{max_lat}"
            )));
        }
        if min_lon > max_lon || min_lat > max_lat {
            return Err(GeoError::InvalidBoundingBox(format!(
                "min exceeds max: {min_lon},{min_lat},{max_lon},{max_lat}"
            )));
        }
        Ok(b)
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        p.lon >= self.min_lon && p.lon <= self.max_lon && p.lat >= self.min_lat && p.lat <= self.max_lat
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lon: (self.min_lon + self.max_lon) / 2.0,
            lat: (self.min_lat + self.max_lat) / 2.0,
        }
    }

    pub fn width_deg(&self) -> f64 {
        self.max_lon - self.min_lon
    }

    pub fn height_deg(&self) -> f64 {
        self.max_lat - self.min_lat
    }

    /// Grows the box by `fraction` of its extent on every side. Degenerate
    /// extents are widened by `min_pad_deg` instead. The result is clamped to
    /// the WGS84 range.
    pub fn padded(&self, fraction: f64, min_pad_deg: f64) -> BoundingBox {
        let pad_lon = (self.width_deg() * fraction).max(min_pad_deg);
        let pad_lat = (self.height_deg() * fraction).max(min_pad_deg);
        BoundingBox {
            min_lon: (self.min_lon - pad_lon).max(-180.0),
            min_lat: (self.min_lat - pad_lat).max(-90.0),
            max_lon: (self.max_lon + pad_lon).min(180.0),
            max_lat: (self.max_lat + pad_lat).min(90.0),
        }
    }

    /// Box of all points within `radius_m` of `center` (a conservative
    /// superset; callers still filter by exact distance).
    pub fn around(center: GeoPoint, radius_m: f64) -> BoundingBox {
        let dlat = radius_m / METERS_PER_DEGREE;
        let cos_lat = center.lat.to_radians().cos().max(1e-6);
        let dlon = (dlat / cos_lat).min(180.0);
        BoundingBox {
            min_lon: (center.lon - dlon).max(-180.0),
            min_lat: (center.lat - dlat).max(-90.0),
            max_lon: (center.lon + dlon).min(180.0),
            max_lat: (center.lat + dlat).min(90.0),
        }
    }
}

impl std::fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "lon {:.4} to {:.4}, lat {:.4} to {:.4}",
            self.min_lon, self.max_lon, self.min_lat, self.max_lat
        )
    }
}

/// Great-circle distance in meters on the mean-radius sphere.
pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Summed haversine length of consecutive segments.
pub fn path_length(points: &[GeoPoint]) -> f64 {
    points.windows(2).map(|w| haversine_distance(w[0], w[1])).sum()
}

/// Closest point to `p` on the segment `a`-`b`, found in a local
/// equirectangular plane centred on the segment.
pub fn project_onto_segment(p: GeoPoint, a: GeoPoint, b: GeoPoint) -> GeoPoint {
    let lat0 = ((a.lat + b.lat) / 2.0).to_radians();
    let kx = lat0.cos();
    let (bx, by) = (wrap_lon_delta(b.lon - a.lon) * kx, b.lat - a.lat);
    let (px, py) = (wrap_lon_delta(p.lon - a.lon) * kx, p.lat - a.lat);
    let len2 = bx * bx + by * by;
    if len2 == 0.0 {
        return a;
    }
    let t = ((px * bx + py * by) / len2).clamp(0.0, 1.0);
    GeoPoint {
        lon: a.lon + t * wrap_lon_delta(b.lon - a.lon),
        lat: a.lat + t * (b.lat - a.lat),
    }
}

fn wrap_lon_delta(d: f64) -> f64 {
    if d > 180.0 {
        d - 360.0
    } else if d < -180.0 {
        d + 360.0
    } else {
        d
    }
}

/// Minimum great-circle distance from `p` to any segment of `line`.
pub fn point_to_polyline_distance(p: GeoPoint, line: &[GeoPoint]) -> Result<f64, GeoError> {
    match line {
        [] => Err(GeoError::EmptyPolyline),
        [q] => Ok(haversine_distance(p, *q)),
        _ => Ok(line
            .windows(2)
            .map(|w| haversine_distance(p, project_onto_segment(p, w[0], w[1])))
            .fold(f64::INFINITY, f64::min)),
    }
}

/// Tightest box containing every point.
pub fn bbox_of(points: &[GeoPoint]) -> Result<BoundingBox, GeoError> {
    let first = points.first().ok_or(GeoError::EmptyPointSet)?;
    let init = BoundingBox {
        min_lon: first.lon,
        min_lat: first.lat,
        max_lon: first.lon,
        max_lat: first.lat,
    };
    Ok(points.iter().skip(1).fold(init, |b, p| BoundingBox {
        min_lon: b.min_lon.min(p.lon),
        min_lat: b.min_lat.min(p.lat),
        max_lon: b.max_lon.max(p.lon),
        max_lat: b.max_lat.max(p.lat),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(lon: f64, lat: f64) -> GeoPoint {
        GeoPoint { lon, lat }
    }

    #[test]
    fn identity_is_zero() {
        let a = pt(-8.6107, 41.1452);
        assert_eq!(haversine_distance(a, a), 0.0);
    }

    #[test]
    fn symmetric() {
        let a = pt(-8.6107, 41.1452);
        let b = pt(-8.6308, 41.1588);
        assert_eq!(haversine_distance(a, b), haversine_distance(b, a));
    }

    // Golden value from an atan2 great-circle formula evaluated at 40 digits
    // (mpmath), R = 6,371,008.8 m.
    #[test]
    fn porto_golden_distance() {
        let d = haversine_distance(pt(-8.6107, 41.1452), pt(-8.6308, 41.1588));
        let golden = 2262.531356327874;
        assert!((d - golden).abs() / golden < 1e-3, "{d}");
    }

    #[test]
    fn vertex_distance_is_zero() {
        let line = [pt(-8.61, 41.14), pt(-8.62, 41.15), pt(-8.63, 41.15)];
        assert_eq!(point_to_polyline_distance(line[1], &line).unwrap(), 0.0);
        assert_eq!(point_to_polyline_distance(line[2], &line).unwrap(), 0.0);
    }

    #[test]
    fn single_point_polyline_is_haversine() {
        let p = pt(-8.6, 41.1);
        let q = pt(-8.65, 41.2);
        assert_eq!(point_to_polyline_distance(p, &[q]).unwrap(), haversine_distance(p, q));
    }

    #[test]
    fn empty_polyline_errors() {
        assert_eq!(
            point_to_polyline_distance(pt(0.0, 0.0), &[]),
            Err(GeoError::EmptyPolyline)
        );
    }

    #[test]
    fn perpendicular_foot_on_meridian_segment() {
        // Segment along a meridian; the foot of the perpendicular sits at the same latitude.
        let a = pt(-8.61, 41.10);
        let b = pt(-8.61, 41.20);
        let p = pt(-8.60, 41.15);
        let d = point_to_polyline_distance(p, &[a, b]).unwrap();
        let expected = haversine_distance(p, pt(-8.61, 41.15));
        assert!((d - expected).abs() < 0.01, "{d} vs {expected}");
    }

    #[test]
    fn bbox_singleton_and_pair() {
        let b = bbox_of(&[pt(0.0, 0.0)]).unwrap();
        assert_eq!((b.min_lon, b.min_lat, b.max_lon, b.max_lat), (0.0, 0.0, 0.0, 0.0));
        let b = bbox_of(&[pt(-1.0, 2.0), pt(3.0, -4.0)]).unwrap();
        assert_eq!((b.min_lon, b.min_lat, b.max_lon, b.max_lat), (-1.0, -4.0, 3.0, 2.0));
        assert_eq!(bbox_of(&[]), Err(GeoError::EmptyPointSet));
    }

    #[test]
    fn bbox_contains_every_point() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<GeoPoint> = (0..10_000)
            .map(|_| pt(rng.random_range(-180.0..=180.0), rng.random_range(-90.0..=90.0)))
            .collect();
        let b = bbox_of(&pts).unwrap();
        assert!(pts.iter().all(|p| b.contains(*p)));
    }

    #[test]
    fn geopoint_validation() {
        assert!(GeoPoint::new(-8.6, 41.1).is_ok());
        assert!(GeoPoint::new(181.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -90.5).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
        assert!(BoundingBox::new(1.0, 0.0, 0.0, 1.0).is_err());
    }

    fn porto_point() -> impl Strategy<Value = GeoPoint> {
        (-8.72f64..-8.52, 41.08f64..41.28).prop_map(|(lon, lat)| pt(lon, lat))
    }

    proptest! {
        #[test]
        fn triangle_inequality(a in porto_point(), b in porto_point(), c in porto_point()) {
            let ab = haversine_distance(a, b);
            let bc = haversine_distance(b, c);
            let ac = haversine_distance(a, c);
            prop_assert!(ac <= ab + bc + 1e-6);
        }

        #[test]
        fn polyline_distance_bounded_by_vertices(
            p in porto_point(),
            line in prop::collection::vec(porto_point(), 1..12),
        ) {
            let d = point_to_polyline_distance(p, &line).unwrap();
            let vmin = line.iter().map(|v| haversine_distance(p, *v)).fold(f64::INFINITY, f64::min);
            prop_assert!(d <= vmin + 1e-9);
            prop_assert!(d >= 0.0);
        }

        #[test]
        fn bbox_permutation_invariant(
            mut pts in prop::collection::vec(porto_point(), 1..40),
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let before = bbox_of(&pts).unwrap();
            pts.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(before, bbox_of(&pts).unwrap());
        }
    }
}
