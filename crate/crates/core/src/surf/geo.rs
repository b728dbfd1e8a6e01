//! Great-circle distances and local planar offsets.

use crate::bim::Geocode;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Haversine great-circle distance in meters.
pub fn haversine_distance(a: Geocode, b: Geocode) -> f64 {
    let (lat1, lat2) = (a.lat().to_radians(), b.lat().to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon() - a.lon()).to_radians();
    let s = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    // clamp guards round-off just above 1 for antipodes
    2.0 * EARTH_RADIUS_M * s.sqrt().min(1.0).asin()
}

/// Offset of `point` from `origin` in kilometers as `(north, east)`, using a
/// local equirectangular approximation anchored at the origin latitude.
pub fn local_offset_km(origin: Geocode, point: Geocode) -> (f64, f64) {
    let r_km = EARTH_RADIUS_M / 1000.0;
    let north = (point.lat() - origin.lat()).to_radians() * r_km;
    let mut dlon = point.lon() - origin.lon();
    if dlon > 180.0 {
        dlon -= 360.0;
    } else if dlon < -180.0 {
        dlon += 360.0;
    }
    let east = dlon.to_radians() * r_km * origin.lat().to_radians().cos();
    (north, east)
}

/// Unit-sphere Cartesian coordinates. Chord length between two such vectors is
/// strictly monotone in great-circle distance.
pub(crate) fn unit_vector(g: Geocode) -> [f64; 3] {
    let (lat, lon) = (g.lat().to_radians(), g.lon().to_radians());
    [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
}

/// Meters per degree of latitude.
pub fn meters_per_degree() -> f64 {
    EARTH_RADIUS_M * std::f64::consts::PI / 180.0
}
