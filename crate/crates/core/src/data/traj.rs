use serde::{Deserialize, Serialize};

use super::geo::{haversine, GpsPoint};
use crate::error::{Error, Result};

/// A raw GPS journey. `travel_time` is in minutes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpsTrajectory {
    pub id: String,
    pub points: Vec<GpsPoint>,
    pub label: Option<usize>,
    pub travel_time: Option<f64>,
}

impl GpsTrajectory {
    /// Builds a trajectory and checks length ≥ 2, valid coordinates and
    /// strictly increasing timestamps.
    pub fn new(id: impl Into<String>, points: Vec<GpsPoint>) -> Result<Self> {
        let t = Self { id: id.into(), points, label: None, travel_time: None };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::Data(format!("trajectory {} has {} points", self.id, self.points.len())));
        }
        for (i, p) in self.points.iter().enumerate() {
            if !p.is_valid() {
                return Err(Error::Data(format!("trajectory {}: invalid point {i}: {p:?}", self.id)));
            }
            if i > 0 && p.t <= self.points[i - 1].t {
                return Err(Error::Data(format!("trajectory {}: timestamp {i} not increasing", self.id)));
            }
        }
        Ok(())
    }

    /// Sum of haversine distances between consecutive points.
    pub fn path_length(&self) -> f64 {
        self.points.windows(2).map(|w| haversine(&w[0], &w[1])).sum()
    }

    pub fn start_time(&self) -> f64 {
        self.points[0].t
    }

    /// Elapsed minutes between first and last point.
    pub fn duration_minutes(&self) -> f64 {
        (self.points[self.points.len() - 1].t - self.points[0].t) / 60.0
    }
}

/// One cell visit. `d` is metres and `r` the azimuth to the previous
/// token's anchor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridToken {
    pub cell_id: usize,
    pub t: f64,
    pub anchor: GpsPoint,
    pub d: f64,
    pub r: f64,
}

impl GridToken {
    /// (x, y, d, r): lon, lat, distance, azimuth.
    pub fn feat(&self) -> [f64; 4] {
        [self.anchor.lon, self.anchor.lat, self.d, self.r]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoadToken {
    pub segment_id: usize,
    pub t: i64,
    pub minute_of_day: usize,
    pub day_of_week: usize,
    pub road_type: usize,
}

impl RoadToken {
    /// Derives the calendar indices from `t` under a fixed UTC offset in
    /// seconds. Day 0 is Monday.
    pub fn at(segment_id: usize, t: i64, road_type: usize, utc_offset: i64) -> Self {
        let (minute_of_day, day_of_week) = calendar(t, utc_offset);
        Self { segment_id, t, minute_of_day, day_of_week, road_type }
    }
}

/// (minute of day, day of week with Monday = 0).
pub fn calendar(t: i64, utc_offset: i64) -> (usize, usize) {
    let local = t + utc_offset;
    let days = local.div_euclid(86_400);
    let secs = local.rem_euclid(86_400);
    // 1970-01-01 was a Thursday.
    ((secs / 60) as usize, (days + 3).rem_euclid(7) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calendar_monday_one_am() {
        // 1970-01-05 was a Monday.
        let t = 4 * 86_400 + 3600;
        assert_eq!(calendar(t, 0), (60, 0));
        assert_eq!(calendar(0, 0), (0, 3));
        assert_eq!(calendar(-60, 0), (1439, 2));
        assert_eq!(calendar(4 * 86_400 + 3600 - 7200, 7200), (60, 0));
    }

    #[test]
    fn validation() {
        let p = |t| GpsPoint::new(0.0, 0.0, t);
        assert!(GpsTrajectory::new("a", vec![p(0.0)]).is_err());
        assert!(GpsTrajectory::new("a", vec![p(0.0), p(0.0)]).is_err());
        assert!(GpsTrajectory::new("a", vec![p(0.0), GpsPoint::new(181.0, 0.0, 1.0)]).is_err());
        let t = GpsTrajectory::new("a", vec![p(0.0), p(120.0)]).unwrap();
        assert_eq!(t.duration_minutes(), 2.0);
    }
}
