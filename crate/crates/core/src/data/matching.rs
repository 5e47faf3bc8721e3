//! Hidden-Markov map matching: Gaussian emissions on point-to-segment
//! distance, transitions penalising the gap between network route length
//! and straight-line distance, decoded with Viterbi and path-completed.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::geo::{project_onto_segment, LocalFrame};
use super::road::{RoadNetwork, Router};
use super::traj::{GpsTrajectory, RoadToken};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub search_radius: f64,
    pub sigma: f64,
    pub beta: f64,
    pub max_candidates: usize,
    /// Backward movement along one segment up to this many metres is read
    /// as noise rather than a loop around the block.
    pub backward_tolerance: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { search_radius: 200.0, sigma: 20.0, beta: 200.0, max_candidates: 8, backward_tolerance: 50.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub segment: usize,
    pub distance: f64,
    /// Metres from the segment start to the projected point.
    pub offset: f64,
}

/// Bucketed spatial index over segment geometry in a local planar frame.
pub struct SegmentIndex {
    frame: LocalFrame,
    lines: Vec<Vec<(f64, f64)>>,
    scale: Vec<f64>,
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl SegmentIndex {
    pub fn new(net: &RoadNetwork, cell: f64) -> Self {
        let n = net.len().max(1) as f64;
        let (sx, sy) = net
            .segments
            .iter()
            .map(|s| s.midpoint())
            .fold((0.0, 0.0), |acc, m| (acc.0 + m.0, acc.1 + m.1));
        let frame = LocalFrame::new(sx / n, sy / n);
        let mut lines = Vec::with_capacity(net.len());
        let mut scale = Vec::with_capacity(net.len());
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for s in &net.segments {
            let line: Vec<(f64, f64)> = s.polyline.iter().map(|&(x, y)| frame.to_xy(x, y)).collect();
            let planar: f64 = line.windows(2).map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt()).sum();
            scale.push(if planar > 0.0 { s.length / planar } else { 1.0 });
            let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for &(x, y) in &line {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
            for bx in (x0 / cell).floor() as i64..=(x1 / cell).floor() as i64 {
                for by in (y0 / cell).floor() as i64..=(y1 / cell).floor() as i64 {
                    buckets.entry((bx, by)).or_default().push(s.id);
                }
            }
            lines.push(line);
        }
        Self { frame, lines, scale, cell, buckets }
    }

    /// Segments within `radius` of the position, nearest first.
    pub fn candidates(&self, lon: f64, lat: f64, radius: f64, limit: usize) -> Vec<Candidate> {
        let p = self.frame.to_xy(lon, lat);
        let reach = (radius / self.cell).ceil() as i64;
        let (bx, by) = ((p.0 / self.cell).floor() as i64, (p.1 / self.cell).floor() as i64);
        let mut seen = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                if let Some(ids) = self.buckets.get(&(bx + dx, by + dy)) {
                    seen.extend_from_slice(ids);
                }
            }
        }
        seen.sort_unstable();
        seen.dedup();
        let mut out: Vec<Candidate> = seen
            .into_iter()
            .filter_map(|id| {
                let (distance, offset) = self.project(id, p);
                (distance <= radius).then_some(Candidate { segment: id, distance, offset })
            })
            .collect();
        out.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.segment.cmp(&b.segment)));
        out.truncate(limit);
        out
    }

    fn project(&self, id: usize, p: (f64, f64)) -> (f64, f64) {
        let line = &self.lines[id];
        let (mut best, mut at, mut walked) = (f64::INFINITY, 0.0, 0.0);
        for w in line.windows(2) {
            let (d, off) = project_onto_segment(p, w[0], w[1]);
            if d < best {
                best = d;
                at = walked + off;
            }
            walked += ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
        }
        (best, at * self.scale[id])
    }
}

/// Decoded segment path plus, for each GPS point, the index of the path
/// entry it was matched to.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchedRoute {
    pub segments: Vec<usize>,
    pub point_slot: Vec<usize>,
}

pub struct MapMatcher<'n> {
    pub router: Router<'n>,
    pub index: SegmentIndex,
    pub config: MatchConfig,
}

enum Move {
    Stay,
    Loop,
    Advance,
}

impl<'n> MapMatcher<'n> {
    pub fn new(net: &'n RoadNetwork, config: MatchConfig) -> Self {
        let index = SegmentIndex::new(net, config.search_radius.max(1.0));
        Self { router: Router::new(net), index, config }
    }

    pub fn network(&self) -> &RoadNetwork {
        self.router.network()
    }

    fn movement(&self, a: &Candidate, b: &Candidate) -> (f64, Move) {
        let net = self.network();
        if a.segment == b.segment && b.offset >= a.offset - self.config.backward_tolerance {
            return ((b.offset - a.offset).max(0.0), Move::Stay);
        }
        let rest = (net.segments[a.segment].length - a.offset).max(0.0);
        let route = rest + self.router.gap(a.segment, b.segment) + b.offset;
        (route, if a.segment == b.segment { Move::Loop } else { Move::Advance })
    }

    /// Viterbi decoding followed by shortest-path completion.
    pub fn match_route(&self, gps: &GpsTrajectory) -> Result<MatchedRoute> {
        let cfg = &self.config;
        let mut layers: Vec<Vec<Candidate>> = Vec::with_capacity(gps.points.len());
        for (index, p) in gps.points.iter().enumerate() {
            let c = self.index.candidates(p.lon, p.lat, cfg.search_radius, cfg.max_candidates);
            if c.is_empty() {
                return Err(Error::Unmatchable { index, radius: cfg.search_radius });
            }
            layers.push(c);
        }
        let emission = |c: &Candidate| -0.5 * (c.distance / cfg.sigma).powi(2);
        let mut score: Vec<f64> = layers[0].iter().map(emission).collect();
        let mut back: Vec<Vec<usize>> = vec![Vec::new()];
        for t in 1..layers.len() {
            let (p0, p1) = (&gps.points[t - 1], &gps.points[t]);
            let (a, b) = (self.index.frame.to_xy(p0.lon, p0.lat), self.index.frame.to_xy(p1.lon, p1.lat));
            let gc = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
            let mut next = vec![f64::NEG_INFINITY; layers[t].len()];
            let mut arg = vec![0usize; layers[t].len()];
            for (j, cj) in layers[t].iter().enumerate() {
                for (i, ci) in layers[t - 1].iter().enumerate() {
                    if score[i] == f64::NEG_INFINITY {
                        continue;
                    }
                    let (route, _) = self.movement(ci, cj);
                    if !route.is_finite() {
                        continue;
                    }
                    let s = score[i] - (route - gc).abs() / cfg.beta + emission(cj);
                    if s > next[j] {
                        next[j] = s;
                        arg[j] = i;
                    }
                }
            }
            if next.iter().all(|s| *s == f64::NEG_INFINITY) {
                return Err(Error::Disconnected { from: t - 1, to: t });
            }
            score = next;
            back.push(arg);
        }
        let mut best = 0;
        for (j, s) in score.iter().enumerate() {
            if *s > score[best] {
                best = j;
            }
        }
        let mut chosen = vec![0usize; layers.len()];
        chosen[layers.len() - 1] = best;
        for t in (1..layers.len()).rev() {
            chosen[t - 1] = back[t][chosen[t]];
        }

        let first = layers[0][chosen[0]];
        let mut segments = vec![first.segment];
        let mut point_slot = vec![0];
        for t in 1..layers.len() {
            let (a, b) = (&layers[t - 1][chosen[t - 1]], &layers[t][chosen[t]]);
            match self.movement(a, b).1 {
                Move::Stay => {}
                Move::Loop | Move::Advance => {
                    let mid = self
                        .router
                        .between(a.segment, b.segment)
                        .ok_or(Error::Disconnected { from: t - 1, to: t })?;
                    for s in mid.into_iter().chain(std::iter::once(b.segment)) {
                        if segments.last() != Some(&s) {
                            segments.push(s);
                        }
                    }
                }
            }
            point_slot.push(segments.len() - 1);
        }
        Ok(MatchedRoute { segments, point_slot })
    }

    /// Matches and timestamps a trajectory.
    pub fn map_match(&self, gps: &GpsTrajectory, utc_offset: i64) -> Result<Vec<RoadToken>> {
        let route = self.match_route(gps)?;
        Ok(assign_road_times(&route, gps, self.network(), utc_offset))
    }
}

/// Timestamps a matched path: a segment takes the first aligned point's
/// time; segments without points are interpolated linearly in path index
/// between their nearest timestamped neighbours.
pub fn assign_road_times(route: &MatchedRoute, gps: &GpsTrajectory, net: &RoadNetwork, utc_offset: i64) -> Vec<RoadToken> {
    let n = route.segments.len();
    let mut time: Vec<Option<f64>> = vec![None; n];
    for (p, &slot) in gps.points.iter().zip(&route.point_slot) {
        if time[slot].is_none() {
            time[slot] = Some(p.t);
        }
    }
    let known: Vec<usize> = (0..n).filter(|&i| time[i].is_some()).collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = match time[i] {
            Some(t) => t,
            None => {
                let lo = known.iter().rev().find(|&&k| k < i).copied();
                let hi = known.iter().find(|&&k| k > i).copied();
                match (lo, hi) {
                    (Some(a), Some(b)) => {
                        let (ta, tb) = (time[a].unwrap(), time[b].unwrap());
                        ta + (tb - ta) * (i - a) as f64 / (b - a) as f64
                    }
                    (Some(a), None) => time[a].unwrap(),
                    (None, Some(b)) => time[b].unwrap(),
                    (None, None) => gps.points[0].t,
                }
            }
        };
        let seg = route.segments[i];
        out.push(RoadToken::at(seg, t.round() as i64, net.segments[seg].road_type, utc_offset));
    }
    out
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let keep = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { row[j + 1].max(row[j]) };
            diag = keep;
        }
    }
    row[b.len()]
}

/// `LCS(pred, truth) / max(len)`; 1 for identical paths.
pub fn segment_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let m = pred.len().max(truth.len());
    if m == 0 {
        return 1.0;
    }
    lcs_len(pred, truth) as f64 / m as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::geo::GpsPoint;
    use crate::data::road::tests::toy;

    fn traj(points: Vec<(f64, f64)>) -> GpsTrajectory {
        let pts = points.into_iter().enumerate().map(|(i, (x, y))| GpsPoint::new(x, y, 100.0 + 30.0 * i as f64)).collect();
        GpsTrajectory { id: "m".into(), points: pts, label: None, travel_time: None }
    }

    #[test]
    fn points_on_one_segment() {
        let net = toy();
        let m = MapMatcher::new(&net, MatchConfig::default());
        let route = m.match_route(&traj(vec![(0.0012, 0.0), (0.0015, 0.0), (0.0018, 0.0)])).unwrap();
        assert_eq!(route.segments, vec![1]);
    }

    #[test]
    fn gap_is_completed_and_interpolated() {
        let net = toy();
        let m = MapMatcher::new(&net, MatchConfig { search_radius: 30.0, ..Default::default() });
        let route = m.match_route(&traj(vec![(0.0004, 0.0), (0.0035, 0.0)])).unwrap();
        assert_eq!(route.segments, vec![0, 1, 2, 3]);
        assert_eq!(route.point_slot, vec![0, 3]);
        let toks = assign_road_times(&route, &traj(vec![(0.0004, 0.0), (0.0035, 0.0)]), &net, 0);
        assert_eq!(toks.iter().map(|t| t.t).collect::<Vec<_>>(), vec![100, 110, 120, 130]);
        for w in route.segments.windows(2) {
            assert!(net.adjacent(w[0], w[1]));
        }
    }

    #[test]
    fn first_point_rule_and_midpoint() {
        let net = toy();
        let route = MatchedRoute { segments: vec![0, 1, 2], point_slot: vec![0, 0, 2] };
        let gps = GpsTrajectory {
            id: "x".into(),
            points: vec![GpsPoint::new(0.0, 0.0, 100.0), GpsPoint::new(0.0, 0.0, 130.0), GpsPoint::new(0.0, 0.0, 200.0)],
            label: None,
            travel_time: None,
        };
        let toks = assign_road_times(&route, &gps, &net, 0);
        assert_eq!(toks[0].t, 100);
        assert_eq!(toks[1].t, 150);
        assert_eq!(toks[2].road_type, net.segments[2].road_type);
    }

    #[test]
    fn unmatchable_point() {
        let net = toy();
        let m = MapMatcher::new(&net, MatchConfig::default());
        match m.match_route(&traj(vec![(0.001, 0.0), (0.001, 0.5)])) {
            Err(Error::Unmatchable { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn disconnected_pair() {
        let net = toy();
        let m = MapMatcher::new(&net, MatchConfig { search_radius: 30.0, ..Default::default() });
        assert!(matches!(m.match_route(&traj(vec![(0.0035, 0.0), (0.0005, 0.0)])), Err(Error::Disconnected { .. })));
    }

    #[test]
    fn lcs_examples() {
        assert_eq!(lcs_len(&[1, 2, 3, 4], &[1, 3, 4, 5]), 3);
        assert_eq!(lcs_len::<u8>(&[], &[1]), 0);
        assert_eq!(segment_accuracy(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(segment_accuracy(&[1, 2], &[1, 2, 3, 4]), 0.5);
    }
}
