//! Trajectory data model and preprocessing.

pub mod geo;
pub mod grid;
pub mod ingest;
pub mod io;
pub mod mask;
pub mod matching;
pub mod road;
pub mod synth;
pub mod traj;

pub use geo::{azimuth, haversine, GpsPoint};
pub use grid::{to_grid_trajectory, traffic_flow, GridSpec};
pub use ingest::{ingest, split_of, IngestStats, Sample, Split};
pub use mask::{plan_mask, MaskPlan};
pub use matching::{assign_road_times, MapMatcher, MatchConfig, MatchedRoute};
pub use road::{RoadNetwork, RoadSegment, Router, NUM_ROAD_TYPES};
pub use synth::{synth_world, SynthConfig, SynthWorld};
pub use traj::{GpsTrajectory, GridToken, RoadToken};
