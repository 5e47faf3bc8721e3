use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::geo::{haversine, GpsPoint};
use crate::error::{Error, Result};

pub const NUM_ROAD_TYPES: usize = 8;

pub const ROAD_TYPE_NAMES: [&str; NUM_ROAD_TYPES] =
    ["motorway", "trunk", "primary", "secondary", "tertiary", "unclassified", "residential", "living_street"];

/// A directed road segment. `maxspeed` is km/h, `avg_travel_time` seconds,
/// `direction` is 1 for one-way streets and 0 otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub id: usize,
    pub polyline: Vec<(f64, f64)>,
    pub length: f64,
    pub road_type: usize,
    pub maxspeed: f64,
    pub avg_travel_time: f64,
    pub direction: u8,
    pub out_degree: usize,
    pub in_degree: usize,
}

impl RoadSegment {
    pub fn start(&self) -> (f64, f64) {
        self.polyline[0]
    }

    pub fn end(&self) -> (f64, f64) {
        self.polyline[self.polyline.len() - 1]
    }

    pub fn midpoint(&self) -> (f64, f64) {
        let (a, b) = (self.start(), self.end());
        ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0)
    }

    /// Haversine length of the polyline.
    pub fn geometric_length(&self) -> f64 {
        self.polyline
            .windows(2)
            .map(|w| haversine(&GpsPoint::new(w[0].0, w[0].1, 0.0), &GpsPoint::new(w[1].0, w[1].1, 0.0)))
            .sum()
    }
}

/// Segments with successor/predecessor lists; `succ[i]` contains `j` iff
/// traffic can pass from the end of `i` into `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadNetwork {
    pub segments: Vec<RoadSegment>,
    pub succ: Vec<Vec<usize>>,
    pub pred: Vec<Vec<usize>>,
}

impl RoadNetwork {
    /// Segment ids must equal their position.
    pub fn new(segments: Vec<RoadSegment>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = segments.len();
        for (i, s) in segments.iter().enumerate() {
            if s.id != i {
                return Err(Error::Data(format!("segment at position {i} has id {}", s.id)));
            }
            if !(s.length > 0.0) || s.road_type >= NUM_ROAD_TYPES || s.polyline.len() < 2 {
                return Err(Error::Data(format!("segment {i} invalid: length {}, type {}", s.length, s.road_type)));
            }
        }
        let mut succ = vec![Vec::new(); n];
        let mut pred = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Data(format!("edge ({a}, {b}) references a missing segment")));
            }
            if !succ[a].contains(&b) {
                succ[a].push(b);
                pred[b].push(a);
            }
        }
        Ok(Self { segments, succ, pred })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        self.succ[a].contains(&b)
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.succ.iter().enumerate().flat_map(|(a, s)| s.iter().map(move |&b| (a, b))).collect()
    }

    pub fn read_csv(segments: &Path, edges: &Path) -> Result<Self> {
        let not_found = |p: &Path| if p.exists() { None } else { Some(Error::NotFound(p.to_path_buf())) };
        if let Some(e) = not_found(segments).or_else(|| not_found(edges)) {
            return Err(e);
        }
        let mut segs = Vec::new();
        for rec in csv::Reader::from_path(segments)?.deserialize::<SegmentRow>() {
            segs.push(rec?.into_segment()?);
        }
        segs.sort_by_key(|s| s.id);
        let mut es = Vec::new();
        for rec in csv::Reader::from_path(edges)?.deserialize::<(usize, usize)>() {
            es.push(rec?);
        }
        Self::new(segs, &es)
    }

    pub fn write_csv(&self, segments: &Path, edges: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(segments)?;
        for s in &self.segments {
            w.serialize(SegmentRow::from_segment(s))?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(edges)?;
        w.write_record(["from_id", "to_id"])?;
        for (a, b) in self.edges() {
            w.serialize((a, b))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct SegmentRow {
    id: usize,
    length: f64,
    road_type: usize,
    maxspeed: f64,
    avg_travel_time: f64,
    direction: u8,
    out_degree: usize,
    in_degree: usize,
    polyline: String,
}

impl SegmentRow {
    fn from_segment(s: &RoadSegment) -> Self {
        let coords: Vec<String> = s.polyline.iter().map(|(x, y)| format!("{x} {y}")).collect();
        Self {
            id: s.id,
            length: s.length,
            road_type: s.road_type,
            maxspeed: s.maxspeed,
            avg_travel_time: s.avg_travel_time,
            direction: s.direction,
            out_degree: s.out_degree,
            in_degree: s.in_degree,
            polyline: format!("LINESTRING({})", coords.join(", ")),
        }
    }

    fn into_segment(self) -> Result<RoadSegment> {
        Ok(RoadSegment {
            id: self.id,
            polyline: parse_linestring(&self.polyline)?,
            length: self.length,
            road_type: self.road_type,
            maxspeed: self.maxspeed,
            avg_travel_time: self.avg_travel_time,
            direction: self.direction,
            out_degree: self.out_degree,
            in_degree: self.in_degree,
        })
    }
}

/// Parses `LINESTRING(x y, x y, ...)`.
pub fn parse_linestring(wkt: &str) -> Result<Vec<(f64, f64)>> {
    let bad = || Error::Data(format!("malformed WKT linestring: {wkt:?}"));
    let s = wkt.trim();
    let body = s
        .strip_prefix("LINESTRING")
        .map(str::trim_start)
        .and_then(|r| r.strip_prefix('('))
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(bad)?;
    body.split(',')
        .map(|pair| {
            let mut it = pair.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(x)), Some(Ok(y)), None) => Ok((x, y)),
                _ => Err(bad()),
            }
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const NONE: usize = usize::MAX;

/// Shortest-path tree from the end of a source segment. `gap[j]` is the
/// total cost of the segments strictly between the source and `j`.
#[derive(Clone, Debug)]
pub struct PathTree {
    pub source: usize,
    pub gap: Vec<f64>,
    prev: Vec<usize>,
}

impl PathTree {
    /// Segment-weighted Dijkstra: entering segment `j` after `i` costs
    /// `cost[i]` (the segment just left), so `gap` excludes both endpoints.
    pub fn build(net: &RoadNetwork, source: usize, cost: &[f64]) -> Self {
        let n = net.len();
        let mut gap = vec![f64::INFINITY; n];
        let mut prev = vec![NONE; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        for &j in &net.succ[source] {
            if gap[j] > 0.0 {
                gap[j] = 0.0;
                prev[j] = source;
                heap.push(HeapItem(0.0, j));
            }
        }
        while let Some(HeapItem(d, i)) = heap.pop() {
            if done[i] {
                continue;
            }
            done[i] = true;
            for &j in &net.succ[i] {
                let nd = d + cost[i];
                if nd < gap[j] {
                    gap[j] = nd;
                    prev[j] = i;
                    heap.push(HeapItem(nd, j));
                }
            }
        }
        Self { source, gap, prev }
    }

    /// Segments strictly between the source and `target`; `None` if
    /// unreachable.
    pub fn between(&self, target: usize) -> Option<Vec<usize>> {
        if !self.gap[target].is_finite() {
            return None;
        }
        let mut path = Vec::new();
        let mut cur = self.prev[target];
        while cur != self.source {
            path.push(cur);
            cur = self.prev[cur];
        }
        path.reverse();
        Some(path)
    }
}

/// Full path `from … to` minimizing the summed `cost` of the intermediate
/// segments. A path from a segment to itself is the single segment.
pub fn shortest_path(net: &RoadNetwork, from: usize, to: usize, cost: &[f64]) -> Option<Vec<usize>> {
    if from == to {
        return Some(vec![from]);
    }
    let tree = PathTree::build(net, from, cost);
    let mut p = vec![from];
    p.extend(tree.between(to)?);
    p.push(to);
    Some(p)
}

/// Length-weighted shortest paths with per-source caching.
pub struct Router<'n> {
    net: &'n RoadNetwork,
    lengths: Vec<f64>,
    cache: Mutex<HashMap<usize, Arc<PathTree>>>,
}

impl<'n> Router<'n> {
    pub fn new(net: &'n RoadNetwork) -> Self {
        Self { net, lengths: net.segments.iter().map(|s| s.length).collect(), cache: Mutex::new(HashMap::new()) }
    }

    pub fn network(&self) -> &RoadNetwork {
        self.net
    }

    pub fn tree(&self, source: usize) -> Arc<PathTree> {
        if let Some(t) = self.cache.lock().expect("router cache poisoned").get(&source) {
            return t.clone();
        }
        let t = Arc::new(PathTree::build(self.net, source, &self.lengths));
        self.cache.lock().expect("router cache poisoned").insert(source, t.clone());
        t
    }

    /// Metres driven between leaving `a` and entering `b`.
    pub fn gap(&self, a: usize, b: usize) -> f64 {
        self.tree(a).gap[b]
    }

    pub fn between(&self, a: usize, b: usize) -> Option<Vec<usize>> {
        self.tree(a).between(b)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Chain 0 → 1 → 2 → 3 plus a shortcut 0 → 3 through a long segment 4.
    pub(crate) fn toy() -> RoadNetwork {
        let seg = |id, len: f64, x0: f64| RoadSegment {
            id,
            polyline: vec![(x0, 0.0), (x0 + 0.001, 0.0)],
            length: len,
            road_type: id % NUM_ROAD_TYPES,
            maxspeed: 50.0,
            avg_travel_time: len / (50.0 / 3.6),
            direction: 1,
            out_degree: 0,
            in_degree: 0,
        };
        let mut segs = vec![seg(0, 100.0, 0.0), seg(1, 100.0, 0.001), seg(2, 100.0, 0.002), seg(3, 100.0, 0.003), seg(4, 500.0, 0.0)];
        segs[4].polyline = vec![(0.0, 0.01), (0.001, 0.01)];
        RoadNetwork::new(segs, &[(0, 1), (1, 2), (2, 3), (0, 4), (4, 3)]).unwrap()
    }

    #[test]
    fn router_prefers_short_chain() {
        let net = toy();
        let r = Router::new(&net);
        assert_eq!(r.gap(0, 3), 200.0);
        assert_eq!(r.between(0, 3), Some(vec![1, 2]));
        assert_eq!(r.gap(0, 1), 0.0);
        assert_eq!(r.between(0, 1), Some(vec![]));
        assert!(r.between(3, 0).is_none());
        assert_eq!(shortest_path(&net, 0, 3, &[1.0, 1.0, 1.0, 1.0, 1.0]), Some(vec![0, 4, 3]));
    }

    #[test]
    fn csv_round_trip() {
        let net = toy();
        let dir = tempfile::tempdir().unwrap();
        let (s, e) = (dir.path().join("s.csv"), dir.path().join("e.csv"));
        net.write_csv(&s, &e).unwrap();
        let back = RoadNetwork::read_csv(&s, &e).unwrap();
        assert_eq!(back, net);
        assert!(matches!(RoadNetwork::read_csv(&dir.path().join("x.csv"), &e), Err(Error::NotFound(_))));
    }

    #[test]
    fn invalid_inputs() {
        let mut segs = toy().segments;
        assert!(RoadNetwork::new(segs.clone(), &[(0, 9)]).is_err());
        segs[2].length = 0.0;
        assert!(RoadNetwork::new(segs, &[]).is_err());
        assert!(parse_linestring("POINT(1 2)").is_err());
        assert_eq!(parse_linestring("LINESTRING (1 2, 3.5 -4)").unwrap(), vec![(1.0, 2.0), (3.5, -4.0)]);
    }
}
