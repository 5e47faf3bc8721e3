//! Glue between raw trajectories and model inputs: grid extent, ingestion,
//! training-split flow and the time origin.

use crate::data::{ingest, GpsPoint, GpsTrajectory, GridSpec, IngestStats, MapMatcher, MatchConfig, RoadNetwork, Sample, Split};
use crate::error::{Error, Result};
use crate::model::ModelContext;

/// Margin added around the network when sizing the grid, metres.
pub const GRID_MARGIN: f64 = 500.0;

/// Grid covering every segment vertex plus [`GRID_MARGIN`].
pub fn grid_for_network(net: &RoadNetwork, cell_size: f64) -> Result<GridSpec> {
    let pts: Vec<GpsPoint> = net
        .segments
        .iter()
        .flat_map(|s| s.polyline.iter().map(|&(lon, lat)| GpsPoint::new(lon, lat, 0.0)))
        .collect();
    GridSpec::covering(&pts, cell_size, GRID_MARGIN)
}

/// Ingested samples together with the grid they were mapped onto.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub grid: GridSpec,
    pub samples: Vec<Sample>,
    pub stats: IngestStats,
}

impl Prepared {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

pub fn prepare(trajs: &[GpsTrajectory], net: &RoadNetwork, cell_size: f64, matching: MatchConfig, utc_offset: i64) -> Result<Prepared> {
    let grid = grid_for_network(net, cell_size)?;
    let matcher = MapMatcher::new(net, matching);
    let (samples, stats) = ingest(trajs, &matcher, &grid, utc_offset);
    Ok(Prepared { grid, samples, stats })
}

/// Context whose flow counts only the given (training) samples.
pub fn context_from(grid: GridSpec, net: &RoadNetwork, train: &[&Sample]) -> Result<ModelContext> {
    let flow = crate::data::traffic_flow(train.iter().map(|s| s.grid.as_slice()), &grid);
    ModelContext::new(grid, flow, net)
}

/// Midnight UTC of the day holding the earliest timestamp.
pub fn time_origin(samples: &[&Sample]) -> Result<f64> {
    let t0 = samples
        .iter()
        .map(|s| s.start_time())
        .fold(f64::INFINITY, f64::min);
    if !t0.is_finite() {
        return Err(Error::Data("no samples to take a time origin from".into()));
    }
    Ok((t0 / 86_400.0).floor() * 86_400.0)
}
