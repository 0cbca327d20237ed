//! Great-circle geometry on a spherical Earth.

use crate::event::GeoPoint;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Haversine distance in meters.
pub fn distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Initial bearing from `a` to `b` in degrees, `[0, 360)`.
pub fn bearing(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlambda = (b.lon - a.lon).to_radians();
    let y = dlambda.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * dlambda.cos();
    y.atan2(x).to_degrees().rem_euclid(360.0)
}

/// Absolute difference between two bearings, folded into `[0, 180]`.
pub fn bearing_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    if d > 180.0 {
        360.0 - d
    } else {
        d
    }
}

/// Point reached from `origin` after `meters` along `bearing_deg`.
pub fn destination(origin: GeoPoint, bearing_deg: f64, meters: f64) -> GeoPoint {
    let delta = meters / EARTH_RADIUS_M;
    let theta = bearing_deg.to_radians();
    let phi1 = origin.lat.to_radians();
    let lambda1 = origin.lon.to_radians();
    let phi2 = (phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * theta.cos()).asin();
    let lambda2 = lambda1 + (theta.sin() * delta.sin() * phi1.cos()).atan2(delta.cos() - phi1.sin() * phi2.sin());
    GeoPoint {
        lat: phi2.to_degrees(),
        lon: ((lambda2.to_degrees() + 540.0) % 360.0) - 180.0,
    }
}

/// Offsets `origin` by local east/north displacements in meters.
pub fn offset(origin: GeoPoint, east_m: f64, north_m: f64) -> GeoPoint {
    let dlat = north_m / EARTH_RADIUS_M;
    let dlon = east_m / (EARTH_RADIUS_M * origin.lat.to_radians().cos());
    GeoPoint {
        lat: origin.lat + dlat.to_degrees(),
        lon: origin.lon + dlon.to_degrees(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint { lat, lon }
    }

    #[test]
    fn identical_points_are_zero_apart() {
        assert_eq!(distance(p(52.3759, 9.7320), p(52.3759, 9.7320)), 0.0);
    }

    #[test]
    fn small_latitude_step() {
        // Frozen from an arbitrary-precision evaluation (mpmath, 50 digits) of
        // the haversine formula with R = 6 371 000 m: 11.119492664...
        let d = distance(p(52.3759, 9.7320), p(52.3760, 9.7320));
        assert!((d - 11.119_492_664_4).abs() < 1e-6, "{d}");
    }

    #[test]
    fn destination_inverts_distance_and_bearing() {
        let o = p(52.37, 9.73);
        let q = destination(o, 60.0, 750.0);
        assert!((distance(o, q) - 750.0).abs() < 1e-6);
        assert!((bearing(o, q) - 60.0).abs() < 1e-6);
    }

    #[test]
    fn bearing_difference_folds() {
        assert_eq!(bearing_difference(350.0, 10.0), 20.0);
        assert_eq!(bearing_difference(90.0, 270.0), 180.0);
    }

    proptest! {
        #[test]
        fn distance_is_symmetric(
            a in -80.0f64..80.0, b in -179.0f64..179.0,
            c in -80.0f64..80.0, d in -179.0f64..179.0,
        ) {
            prop_assert_eq!(distance(p(a, b), p(c, d)), distance(p(c, d), p(a, b)));
        }
    }
}
