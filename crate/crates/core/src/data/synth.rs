//! Seeded synthetic city: a jittered street lattice and trips driven along
//! perturbed shortest paths, sampled at a fixed interval with optional
//! positional noise. Every trip keeps its true segment path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::geo::{haversine, GpsPoint, LocalFrame};
use super::road::{shortest_path, PathTree, RoadNetwork, RoadSegment, NUM_ROAD_TYPES};
use super::traj::GpsTrajectory;
use crate::error::{Error, Result};

/// Monday 2024-01-01 00:00:00 UTC.
pub const BASE_TIME: f64 = 1_704_067_200.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Intersections per column and per row.
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
    pub jitter: f64,
    pub origin_lon: f64,
    pub origin_lat: f64,
    pub one_way_fraction: f64,
    pub num_trajectories: usize,
    /// Seconds between GPS fixes.
    pub interval: f64,
    /// Standard deviation of positional noise, metres.
    pub noise_sigma: f64,
    /// km/h, assigned by road type from fastest to slowest.
    pub speed_min: f64,
    pub speed_max: f64,
    pub min_route: f64,
    pub max_route: f64,
    pub num_classes: usize,
    /// Start times are drawn uniformly over this many days after a Monday.
    pub days: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rows: 8,
            cols: 8,
            spacing: 300.0,
            jitter: 30.0,
            origin_lon: -8.63,
            origin_lat: 41.14,
            one_way_fraction: 0.2,
            num_trajectories: 1000,
            interval: 10.0,
            noise_sigma: 0.0,
            speed_min: 30.0,
            speed_max: 60.0,
            min_route: 1200.0,
            max_route: 3000.0,
            num_classes: 3,
            days: 7.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.rows < 2 || self.cols < 2 {
            return bad("lattice needs at least 2x2 intersections");
        }
        if !(self.spacing > 0.0) || !(self.interval > 0.0) || self.noise_sigma < 0.0 {
            return bad("spacing and interval must be positive, noise non-negative");
        }
        if !(self.speed_min > 0.0) || self.speed_max < self.speed_min {
            return bad("invalid speed range");
        }
        if self.jitter < 0.0 || self.jitter * 2.0 >= self.spacing {
            return bad("jitter must be below half the spacing");
        }
        if self.num_classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.max_route < self.min_route || !(0.0..=1.0).contains(&self.one_way_fraction) {
            return bad("invalid route bounds or one-way fraction");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub network: RoadNetwork,
    pub trajectories: Vec<GpsTrajectory>,
    /// True segment path of each trajectory.
    pub truth: Vec<Vec<usize>>,
    /// Per-segment speed in m/s used to drive the trips.
    pub speeds: Vec<f64>,
    pub config: SynthConfig,
    pub seed: u64,
}

pub fn synth_world(config: &SynthConfig, seed: u64) -> Result<SynthWorld> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (network, speeds) = build_lattice(config, &mut rng)?;
    let mut world = SynthWorld { network, trajectories: Vec::new(), truth: Vec::new(), speeds, config: config.clone(), seed };
    let (trajs, truth) = world.trips(config.num_trajectories, 0, "t")?;
    world.trajectories = trajs;
    world.truth = truth;
    Ok(world)
}

fn build_lattice(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<(RoadNetwork, Vec<f64>)> {
    let frame = LocalFrame::new(cfg.origin_lon, cfg.origin_lat);
    let node = |r: usize, c: usize| r * cfg.cols + c;
    let mut pos = Vec::with_capacity(cfg.rows * cfg.cols);
    for r in 0..cfg.rows {
        for c in 0..cfg.cols {
            let jx = rng.random_range(-cfg.jitter..=cfg.jitter);
            let jy = rng.random_range(-cfg.jitter..=cfg.jitter);
            pos.push(frame.to_lonlat(c as f64 * cfg.spacing + jx, r as f64 * cfg.spacing + jy));
        }
    }
    // One type and at most one one-way orientation per street line, so a
    // street keeps its character along its length.
    let lines = cfg.rows + cfg.cols;
    let line_type: Vec<usize> = (0..lines).map(|_| rng.random_range(0..NUM_ROAD_TYPES)).collect();
    let mut one_way: Vec<Option<bool>> = (0..lines)
        .map(|_| (rng.random::<f64>() < cfg.one_way_fraction).then(|| rng.random::<bool>()))
        .collect();
    let seg_factor_seed: u64 = rng.random();

    loop {
        // (from node, to node, line)
        let mut arcs = Vec::new();
        for r in 0..cfg.rows {
            for c in 0..cfg.cols {
                if c + 1 < cfg.cols {
                    push_arcs(&mut arcs, node(r, c), node(r, c + 1), r, one_way[r]);
                }
                if r + 1 < cfg.rows {
                    let line = cfg.rows + c;
                    push_arcs(&mut arcs, node(r, c), node(r + 1, c), line, one_way[line]);
                }
            }
        }
        let mut frng = ChaCha8Rng::seed_from_u64(seg_factor_seed);
        let mut segs = Vec::with_capacity(arcs.len());
        let mut speeds = Vec::with_capacity(arcs.len());
        for (id, &(u, v, line)) in arcs.iter().enumerate() {
            let road_type = line_type[line];
            let maxspeed = cfg.speed_max - (cfg.speed_max - cfg.speed_min) * road_type as f64 / (NUM_ROAD_TYPES - 1) as f64;
            let (a, b) = (pos[u], pos[v]);
            let length = haversine(&GpsPoint::new(a.0, a.1, 0.0), &GpsPoint::new(b.0, b.1, 0.0));
            speeds.push(maxspeed / 3.6 * frng.random_range(0.8..=1.0));
            segs.push(RoadSegment {
                id,
                polyline: vec![a, b],
                length,
                road_type,
                maxspeed,
                avg_travel_time: length / (maxspeed / 3.6),
                direction: one_way[line].is_some() as u8,
                out_degree: 0,
                in_degree: 0,
            });
        }
        let mut edges = Vec::new();
        for (i, &(u1, v1, _)) in arcs.iter().enumerate() {
            for (j, &(u2, v2, _)) in arcs.iter().enumerate() {
                // continue from the end node, no U-turns
                if v1 == u2 && v2 != u1 {
                    edges.push((i, j));
                }
            }
        }
        for &(a, b) in &edges {
            segs[a].out_degree += 1;
            segs[b].in_degree += 1;
        }
        let net = RoadNetwork::new(segs, &edges)?;
        if strongly_connected(&net) {
            return Ok((net, speeds));
        }
        // Drop one-way restrictions until every segment reaches every other.
        match one_way.iter().position(Option::is_some) {
            Some(i) => one_way[i] = None,
            None => return Err(Error::Config("synth: lattice is not strongly connected".into())),
        }
    }
}

fn push_arcs(arcs: &mut Vec<(usize, usize, usize)>, a: usize, b: usize, line: usize, one_way: Option<bool>) {
    match one_way {
        Some(true) => arcs.push((a, b, line)),
        Some(false) => arcs.push((b, a, line)),
        None => {
            arcs.push((a, b, line));
            arcs.push((b, a, line));
        }
    }
}

fn strongly_connected(net: &RoadNetwork) -> bool {
    let ones = vec![1.0; net.len()];
    // Reachability from segment 0 forwards, and to segment 0 via predecessors.
    let fwd = PathTree::build(net, 0, &ones);
    let rev = RoadNetwork { segments: net.segments.clone(), succ: net.pred.clone(), pred: net.succ.clone() };
    let bwd = PathTree::build(&rev, 0, &ones);
    (1..net.len()).all(|j| fwd.gap[j].is_finite() && bwd.gap[j].is_finite())
}

impl SynthWorld {
    /// Generates `count` additional trips; trip `i` uses an RNG stream
    /// derived from the world seed and `first_index + i`, so any subset can
    /// be regenerated independently.
    pub fn trips(&self, count: usize, first_index: u64, prefix: &str) -> Result<(Vec<GpsTrajectory>, Vec<Vec<usize>>)> {
        let mut trajs = Vec::with_capacity(count);
        let mut truth = Vec::with_capacity(count);
        for i in 0..count as u64 {
            let (t, p) = self.trip(first_index + i, prefix)?;
            trajs.push(t);
            truth.push(p);
        }
        Ok((trajs, truth))
    }

    fn trip(&self, index: u64, prefix: &str) -> Result<(GpsTrajectory, Vec<usize>)> {
        let cfg = &self.config;
        let net = &self.network;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index + 1);
        let n = net.len();
        let path = 'pick: {
            for _ in 0..1000 {
                let (o, d) = (rng.random_range(0..n), rng.random_range(0..n));
                if o == d {
                    continue;
                }
                let cost: Vec<f64> = net.segments.iter().map(|s| s.length * rng.random_range(0.8..=1.2)).collect();
                let Some(p) = shortest_path(net, o, d, &cost) else { continue };
                let len: f64 = p.iter().map(|&s| net.segments[s].length).sum();
                if (cfg.min_route..=cfg.max_route).contains(&len) {
                    break 'pick p;
                }
            }
            return Err(Error::Config(format!(
                "synth: no route within [{}, {}] m after 1000 draws",
                cfg.min_route, cfg.max_route
            )));
        };
        let f0 = rng.random_range(0.1..=0.4);
        let f1 = rng.random_range(0.6..=0.9);
        // (segment, start fraction, end fraction, seconds)
        let last = path.len() - 1;
        let pieces: Vec<(usize, f64, f64, f64)> = path
            .iter()
            .enumerate()
            .map(|(k, &s)| {
                let a = if k == 0 { f0 } else { 0.0 };
                let b = if k == last { f1 } else { 1.0 };
                (s, a, b, (b - a) * net.segments[s].length / self.speeds[s])
            })
            .collect();
        let total: f64 = pieces.iter().map(|p| p.3).sum();
        let t0 = (BASE_TIME + rng.random_range(0.0..cfg.days * 86_400.0)).round();

        let frame = LocalFrame::new(cfg.origin_lon, cfg.origin_lat);
        let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
        let mut points = Vec::new();
        let mut emit = |elapsed: f64, rng: &mut ChaCha8Rng| {
            let mut acc = 0.0;
            let mut at = pieces[last];
            let mut frac = 1.0;
            for p in &pieces {
                if elapsed <= acc + p.3 {
                    at = *p;
                    frac = if p.3 > 0.0 { (elapsed - acc) / p.3 } else { 0.0 };
                    break;
                }
                acc += p.3;
            }
            let (s, a, b, _) = at;
            let u = a + (b - a) * frac;
            let seg = &net.segments[s];
            let (x0, y0) = frame.to_xy(seg.start().0, seg.start().1);
            let (x1, y1) = frame.to_xy(seg.end().0, seg.end().1);
            let (mut x, mut y) = (x0 + u * (x1 - x0), y0 + u * (y1 - y0));
            if cfg.noise_sigma > 0.0 {
                x += noise.sample(rng);
                y += noise.sample(rng);
            }
            let (lon, lat) = frame.to_lonlat(x, y);
            points.push(GpsPoint::new(lon, lat, t0 + elapsed));
        };
        let mut k = 0.0;
        while k * cfg.interval < total - 1.0 {
            emit(k * cfg.interval, &mut rng);
            k += 1.0;
        }
        emit(total, &mut rng);

        let (sx, _) = frame.to_xy(net.segments[path[0]].start().0, net.segments[path[0]].start().1);
        let width = (cfg.cols - 1) as f64 * cfg.spacing;
        let band = ((sx / width).clamp(0.0, 1.0 - 1e-9) * cfg.num_classes as f64) as usize;
        let traj = GpsTrajectory {
            id: format!("{prefix}{index:06}"),
            travel_time: Some((points[points.len() - 1].t - points[0].t) / 60.0),
            label: Some(band),
            points,
        };
        traj.validate()?;
        Ok((traj, path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { rows: 5, cols: 5, num_trajectories: 20, min_route: 600.0, max_route: 2000.0, ..Default::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_world(&small(), 3).unwrap();
        let b = synth_world(&small(), 3).unwrap();
        assert_eq!(serde_json::to_string(&a.trajectories).unwrap(), serde_json::to_string(&b.trajectories).unwrap());
        assert_eq!(a.network, b.network);
        let c = synth_world(&small(), 4).unwrap();
        assert_ne!(a.trajectories, c.trajectories);
    }

    #[test]
    fn trips_follow_adjacent_paths() {
        let w = synth_world(&small(), 1).unwrap();
        for (t, p) in w.trajectories.iter().zip(&w.truth) {
            assert!(p.windows(2).all(|e| w.network.adjacent(e[0], e[1])));
            assert_eq!(t.travel_time.unwrap(), t.duration_minutes());
            assert!(t.label.unwrap() < 3);
        }
    }

    #[test]
    fn noiseless_points_lie_on_true_path() {
        let w = synth_world(&small(), 2).unwrap();
        let frame = LocalFrame::new(w.config.origin_lon, w.config.origin_lat);
        for (t, path) in w.trajectories.iter().zip(&w.truth) {
            for p in &t.points {
                let q = frame.to_xy(p.lon, p.lat);
                let best = path
                    .iter()
                    .map(|&s| {
                        let seg = &w.network.segments[s];
                        let a = frame.to_xy(seg.start().0, seg.start().1);
                        let b = frame.to_xy(seg.end().0, seg.end().1);
                        crate::data::geo::project_onto_segment(q, a, b).0
                    })
                    .fold(f64::INFINITY, f64::min);
                assert!(best < 1e-6, "point {best} m off its path");
            }
        }
    }

    #[test]
    fn invalid_config() {
        assert!(synth_world(&SynthConfig { rows: 0, ..small() }, 0).is_err());
        assert!(synth_world(&SynthConfig { interval: 0.0, ..small() }, 0).is_err());
    }
}
