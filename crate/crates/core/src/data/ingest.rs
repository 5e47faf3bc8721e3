//! Conversion of raw GPS trajectories into paired grid/road expressions.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::grid::{to_grid_trajectory, GridSpec};
use super::matching::MapMatcher;
use super::traj::{GpsTrajectory, GridToken, RoadToken};
use crate::error::Result;

/// Trajectories shorter than this many metres are discarded.
pub const MIN_PATH_LENGTH: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Deterministic split from a SHA-256 hash of the id, 0.6/0.2/0.2.
pub fn split_of(id: &str) -> Split {
    let h = Sha256::digest(id.as_bytes());
    let u = u64::from_be_bytes(h[..8].try_into().expect("8 bytes")) as f64 / 2f64.powi(64);
    if u < 0.6 {
        Split::Train
    } else if u < 0.8 {
        Split::Val
    } else {
        Split::Test
    }
}

/// One journey in both discrete expressions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub grid: Vec<GridToken>,
    pub road: Vec<RoadToken>,
    pub label: Option<usize>,
    pub travel_time: Option<f64>,
    pub split: Split,
}

impl Sample {
    pub fn start_time(&self) -> f64 {
        self.grid[0].t
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub input: usize,
    pub too_short: usize,
    pub unmatched: usize,
    pub off_grid: usize,
    pub kept: usize,
}

/// Converts a single trajectory; the caller is responsible for the length
/// filter.
pub fn to_sample(gps: &GpsTrajectory, matcher: &MapMatcher, spec: &GridSpec, utc_offset: i64) -> Result<Sample> {
    let road = matcher.map_match(gps, utc_offset)?;
    let grid = to_grid_trajectory(gps, spec)?;
    Ok(Sample {
        id: gps.id.clone(),
        grid,
        road,
        label: gps.label,
        travel_time: gps.travel_time,
        split: split_of(&gps.id),
    })
}

/// Applies the length filter, map matching and grid mapping. Trajectories
/// that fail matching or leave the grid are dropped and counted.
pub fn ingest(trajs: &[GpsTrajectory], matcher: &MapMatcher, spec: &GridSpec, utc_offset: i64) -> (Vec<Sample>, IngestStats) {
    let mut stats = IngestStats { input: trajs.len(), ..Default::default() };
    let mut out = Vec::new();
    for t in trajs {
        if t.path_length() < MIN_PATH_LENGTH {
            stats.too_short += 1;
            continue;
        }
        match to_sample(t, matcher, spec, utc_offset) {
            Ok(s) => out.push(s),
            Err(crate::Error::OutOfBounds { .. }) => stats.off_grid += 1,
            Err(e) => {
                log::debug!("dropping {}: {e}", t.id);
                stats.unmatched += 1;
            }
        }
    }
    stats.kept = out.len();
    (out, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::geo::GpsPoint;
    use crate::data::matching::MatchConfig;
    use crate::data::synth::{synth_world, SynthConfig};

    #[test]
    fn split_is_stable_and_balanced() {
        assert_eq!(split_of("abc"), split_of("abc"));
        let n = 5000;
        let train = (0..n).filter(|i| split_of(&format!("id{i}")) == Split::Train).count();
        let val = (0..n).filter(|i| split_of(&format!("id{i}")) == Split::Val).count();
        assert!((train as f64 / n as f64 - 0.6).abs() < 0.03);
        assert!((val as f64 / n as f64 - 0.2).abs() < 0.03);
    }

    #[test]
    fn length_filter_drops_exactly_short_trips() {
        let cfg = SynthConfig { rows: 5, cols: 5, num_trajectories: 30, min_route: 300.0, max_route: 2000.0, ..Default::default() };
        let w = synth_world(&cfg, 9).unwrap();
        let all_pts = w.network.segments.iter().flat_map(|s| s.polyline.iter().map(|&(x, y)| GpsPoint::new(x, y, 0.0))).collect::<Vec<_>>();
        let spec = GridSpec::covering(&all_pts, 100.0, 300.0).unwrap();
        let m = MapMatcher::new(&w.network, MatchConfig::default());
        let (samples, stats) = ingest(&w.trajectories, &m, &spec, 0);
        let short = w.trajectories.iter().filter(|t| t.path_length() < MIN_PATH_LENGTH).count();
        assert!(short > 0 && short < 30);
        assert_eq!(stats.too_short, short);
        assert_eq!(stats.kept + stats.too_short + stats.unmatched + stats.off_grid, 30);
        assert!(samples.iter().all(|s| {
            let t = w.trajectories.iter().find(|t| t.id == s.id).unwrap();
            t.path_length() >= MIN_PATH_LENGTH
        }));
    }
}
