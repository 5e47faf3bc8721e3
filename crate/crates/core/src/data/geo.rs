use serde::{Deserialize, Serialize};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// A timestamped position; `t` is seconds since the Unix epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpsPoint {
    pub lon: f64,
    pub lat: f64,
    pub t: f64,
}

impl GpsPoint {
    pub fn new(lon: f64, lat: f64, t: f64) -> Self {
        Self { lon, lat, t }
    }

    pub fn is_valid(&self) -> bool {
        (-180.0..=180.0).contains(&self.lon) && (-90.0..=90.0).contains(&self.lat) && self.t.is_finite()
    }
}

/// Great-circle distance in metres.
pub fn haversine(a: &GpsPoint, b: &GpsPoint) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Initial bearing from `prev` to `cur`, degrees clockwise from north in
/// `[0, 360)`. Coincident points give 0.
pub fn azimuth(prev: &GpsPoint, cur: &GpsPoint) -> f64 {
    if prev.lon == cur.lon && prev.lat == cur.lat {
        return 0.0;
    }
    let (p1, p2) = (prev.lat.to_radians(), cur.lat.to_radians());
    let dl = (cur.lon - prev.lon).to_radians();
    let y = dl.sin() * p2.cos();
    let x = p1.cos() * p2.sin() - p1.sin() * p2.cos() * dl.cos();
    let deg = y.atan2(x).to_degrees().rem_euclid(360.0);
    if deg >= 360.0 {
        0.0
    } else {
        deg
    }
}

/// Equirectangular projection around a reference latitude; adequate at
/// city scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalFrame {
    pub lon0: f64,
    pub lat0: f64,
    m_per_deg_lon: f64,
    m_per_deg_lat: f64,
}

impl LocalFrame {
    pub fn new(lon0: f64, lat0: f64) -> Self {
        let m_per_deg_lat = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        Self { lon0, lat0, m_per_deg_lon: m_per_deg_lat * lat0.to_radians().cos(), m_per_deg_lat }
    }

    /// (east, north) metres from the reference.
    pub fn to_xy(&self, lon: f64, lat: f64) -> (f64, f64) {
        ((lon - self.lon0) * self.m_per_deg_lon, (lat - self.lat0) * self.m_per_deg_lat)
    }

    pub fn to_lonlat(&self, x: f64, y: f64) -> (f64, f64) {
        (self.lon0 + x / self.m_per_deg_lon, self.lat0 + y / self.m_per_deg_lat)
    }
}

/// Closest point of segment `a→b` to `p` in planar coordinates: returns
/// (distance, offset along the segment from `a`).
pub fn project_onto_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let u = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (a.0 + u * dx, a.1 + u * dy);
    (((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt(), u * len2.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn haversine_examples() {
        let a = GpsPoint::new(-8.6, 41.1, 0.0);
        assert_eq!(haversine(&a, &a), 0.0);
        let o = GpsPoint::new(0.0, 0.0, 0.0);
        let e = GpsPoint::new(1.0, 0.0, 0.0);
        let expected = std::f64::consts::PI * EARTH_RADIUS_M / 180.0;
        assert!((haversine(&o, &e) - expected).abs() < 1e-6);
        assert!((haversine(&o, &e) - 111_194.9).abs() < 0.1);
    }

    #[test]
    fn azimuth_examples() {
        let o = GpsPoint::new(0.0, 0.0, 0.0);
        assert_eq!(azimuth(&o, &GpsPoint::new(0.0, 0.01, 1.0)), 0.0);
        assert!((azimuth(&o, &GpsPoint::new(0.01, 0.0, 1.0)) - 90.0).abs() < 1e-9);
        assert!((azimuth(&o, &GpsPoint::new(0.0, -0.01, 1.0)) - 180.0).abs() < 1e-9);
        assert!((azimuth(&o, &GpsPoint::new(-0.01, 0.0, 1.0)) - 270.0).abs() < 1e-9);
        assert_eq!(azimuth(&o, &o), 0.0);
    }

    #[test]
    fn local_frame_round_trip() {
        let f = LocalFrame::new(-8.61, 41.15);
        let (x, y) = f.to_xy(-8.60, 41.16);
        let (lon, lat) = f.to_lonlat(x, y);
        assert!((lon + 8.60).abs() < 1e-12 && (lat - 41.16).abs() < 1e-12);
    }

    #[test]
    fn projection_clamps_to_endpoints() {
        let (d, off) = project_onto_segment((-5.0, 0.0), (0.0, 0.0), (10.0, 0.0));
        assert_eq!((d, off), (5.0, 0.0));
        let (d, off) = project_onto_segment((4.0, 3.0), (0.0, 0.0), (10.0, 0.0));
        assert_eq!((d, off), (3.0, 4.0));
    }

    proptest! {
        #[test]
        fn haversine_symmetric_nonnegative(
            lon1 in -180.0f64..180.0, lat1 in -90.0f64..90.0,
            lon2 in -180.0f64..180.0, lat2 in -90.0f64..90.0,
        ) {
            let a = GpsPoint::new(lon1, lat1, 0.0);
            let b = GpsPoint::new(lon2, lat2, 0.0);
            let d = haversine(&a, &b);
            prop_assert!(d >= 0.0);
            prop_assert!((d - haversine(&b, &a)).abs() < 1e-6);
        }

        #[test]
        fn azimuth_in_range(
            lon1 in -179.0f64..179.0, lat1 in -89.0f64..89.0,
            dlon in -1.0f64..1.0, dlat in -1.0f64..1.0,
        ) {
            let a = GpsPoint::new(lon1, lat1, 0.0);
            let b = GpsPoint::new(lon1 + dlon, (lat1 + dlat).clamp(-90.0, 90.0), 0.0);
            let r = azimuth(&a, &b);
            prop_assert!((0.0..360.0).contains(&r));
        }
    }
}
