use serde::{Deserialize, Serialize};

use super::geo::{azimuth, haversine, GpsPoint, LocalFrame};
use super::traj::{GpsTrajectory, GridToken};
use crate::error::{Error, Result};

/// Regular partition of a rectangle into square cells. Cells are indexed
/// row-major from the southwest corner: `id = row·W + col`, row 0 south.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_lon: f64,
    pub origin_lat: f64,
    pub cell_size: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn new(origin_lon: f64, origin_lat: f64, cell_size: f64, rows: usize, cols: usize) -> Result<Self> {
        if !(cell_size > 0.0) || rows == 0 || cols == 0 {
            return Err(Error::Config(format!("grid {rows}x{cols} with cell size {cell_size}")));
        }
        Ok(Self { origin_lon, origin_lat, cell_size, rows, cols })
    }

    /// Smallest grid with the given cell size covering all points plus a
    /// margin in metres on each side.
    pub fn covering<'a>(points: impl IntoIterator<Item = &'a GpsPoint>, cell_size: f64, margin: f64) -> Result<Self> {
        let (mut lo_lon, mut lo_lat, mut hi_lon, mut hi_lat) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in points {
            lo_lon = lo_lon.min(p.lon);
            lo_lat = lo_lat.min(p.lat);
            hi_lon = hi_lon.max(p.lon);
            hi_lat = hi_lat.max(p.lat);
        }
        if lo_lon > hi_lon {
            return Err(Error::Data("cannot build a grid over no points".into()));
        }
        let frame = LocalFrame::new(lo_lon, lo_lat);
        let (ox, oy) = (-margin, -margin);
        let (origin_lon, origin_lat) = frame.to_lonlat(ox, oy);
        let (w, h) = frame.to_xy(hi_lon, hi_lat);
        let cols = ((w + 2.0 * margin) / cell_size).floor() as usize + 1;
        let rows = ((h + 2.0 * margin) / cell_size).floor() as usize + 1;
        Self::new(origin_lon, origin_lat, cell_size, rows, cols)
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    fn frame(&self) -> LocalFrame {
        LocalFrame::new(self.origin_lon, self.origin_lat)
    }

    /// (row, col) of a position, or `None` outside the grid.
    pub fn locate(&self, lon: f64, lat: f64) -> Option<(usize, usize)> {
        let (x, y) = self.frame().to_xy(lon, lat);
        let (c, r) = ((x / self.cell_size).floor(), (y / self.cell_size).floor());
        if c < 0.0 || r < 0.0 || c >= self.cols as f64 || r >= self.rows as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    pub fn cell_of(&self, lon: f64, lat: f64) -> Option<usize> {
        self.locate(lon, lat).map(|(r, c)| r * self.cols + c)
    }

    /// Position scaled to `[0, 1]²` over the grid extent (unclamped).
    pub fn normalized(&self, lon: f64, lat: f64) -> (f64, f64) {
        let (x, y) = self.frame().to_xy(lon, lat);
        (x / (self.cols as f64 * self.cell_size), y / (self.rows as f64 * self.cell_size))
    }

    /// Centre of cell `id` as (lon, lat).
    pub fn cell_center(&self, id: usize) -> (f64, f64) {
        let (r, c) = (id / self.cols, id % self.cols);
        self.frame().to_lonlat((c as f64 + 0.5) * self.cell_size, (r as f64 + 0.5) * self.cell_size)
    }
}

/// Collapses consecutive points in the same cell into one token anchored at
/// the run's first point.
pub fn to_grid_trajectory(gps: &GpsTrajectory, spec: &GridSpec) -> Result<Vec<GridToken>> {
    let mut out: Vec<GridToken> = Vec::new();
    for (index, p) in gps.points.iter().enumerate() {
        let cell = spec.cell_of(p.lon, p.lat).ok_or(Error::OutOfBounds { index, lon: p.lon, lat: p.lat })?;
        match out.last() {
            Some(last) if last.cell_id == cell => {}
            Some(last) => {
                let prev = last.anchor;
                out.push(GridToken { cell_id: cell, t: p.t, anchor: *p, d: haversine(&prev, p), r: azimuth(&prev, p) });
            }
            None => out.push(GridToken { cell_id: cell, t: p.t, anchor: *p, d: 0.0, r: 0.0 }),
        }
    }
    Ok(out)
}

/// Number of grid tokens per cell over a set of grid trajectories.
pub fn traffic_flow<'a>(trajs: impl IntoIterator<Item = &'a [GridToken]>, spec: &GridSpec) -> Vec<f64> {
    let mut flow = vec![0.0; spec.num_cells()];
    for traj in trajs {
        for tok in traj {
            flow[tok.cell_id] += 1.0;
        }
    }
    flow
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec() -> GridSpec {
        GridSpec::new(-8.7, 41.1, 100.0, 20, 30).unwrap()
    }

    fn traj(points: Vec<(f64, f64)>) -> GpsTrajectory {
        let pts = points.into_iter().enumerate().map(|(i, (x, y))| GpsPoint::new(x, y, i as f64 * 10.0)).collect();
        GpsTrajectory { id: "t".into(), points: pts, label: None, travel_time: None }
    }

    fn offset(s: &GridSpec, x: f64, y: f64) -> (f64, f64) {
        LocalFrame::new(s.origin_lon, s.origin_lat).to_lonlat(x, y)
    }

    #[test]
    fn origin_is_cell_zero() {
        let s = spec();
        let mut t = traj(vec![(s.origin_lon, s.origin_lat)]);
        t.points.truncate(1);
        let toks = to_grid_trajectory(&t, &s).unwrap();
        assert_eq!(toks.len(), 1);
        assert_eq!((toks[0].cell_id, toks[0].d, toks[0].r), (0, 0.0, 0.0));
    }

    #[test]
    fn same_cell_collapses_to_first_point() {
        let s = spec();
        let pts = vec![offset(&s, 10.0, 10.0), offset(&s, 50.0, 20.0), offset(&s, 90.0, 90.0)];
        let toks = to_grid_trajectory(&traj(pts.clone()), &s).unwrap();
        assert_eq!(toks.len(), 1);
        assert_eq!((toks[0].anchor.lon, toks[0].anchor.lat), pts[0]);
    }

    #[test]
    fn eastward_walk_crosses_k_borders() {
        let s = spec();
        for k in 0..6 {
            // from x = 50 m to x = 50 + 100k m in 10 m steps, y fixed
            let pts: Vec<_> = (0..=10 * k).map(|i| offset(&s, 50.0 + 10.0 * i as f64, 250.0)).collect();
            let toks = to_grid_trajectory(&traj(pts), &s).unwrap();
            assert_eq!(toks.len(), k + 1);
            let cols: Vec<_> = toks.iter().map(|t| t.cell_id % s.cols).collect();
            assert!(cols.windows(2).all(|w| w[1] == w[0] + 1));
            assert!(toks.iter().skip(1).all(|t| (t.r - 90.0).abs() < 0.1 && t.d > 0.0));
        }
    }

    #[test]
    fn out_of_bounds_names_index() {
        let s = spec();
        let pts = vec![offset(&s, 10.0, 10.0), (s.origin_lon - 0.1, s.origin_lat)];
        match to_grid_trajectory(&traj(pts), &s) {
            Err(Error::OutOfBounds { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn flow_counts_tokens() {
        let s = spec();
        assert!(traffic_flow(std::iter::empty(), &s).iter().all(|&f| f == 0.0));
        let tok = |c| GridToken { cell_id: c, t: 0.0, anchor: GpsPoint::new(0.0, 0.0, 0.0), d: 0.0, r: 0.0 };
        let a = vec![tok(5), tok(6), tok(5)];
        let b = vec![tok(1)];
        let flow = traffic_flow([a.as_slice(), b.as_slice()], &s);
        assert_eq!(flow[5], 2.0);
        assert_eq!(flow.iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn covering_contains_points() {
        let pts = [GpsPoint::new(-8.62, 41.14, 0.0), GpsPoint::new(-8.58, 41.17, 0.0)];
        let s = GridSpec::covering(&pts, 100.0, 150.0).unwrap();
        assert!(pts.iter().all(|p| s.cell_of(p.lon, p.lat).is_some()));
        let (lon, lat) = s.cell_center(0);
        assert_eq!(s.cell_of(lon, lat), Some(0));
    }

    proptest! {
        #[test]
        fn anchors_are_ordered_subsequence(steps in prop::collection::vec((-60.0f64..60.0, -60.0f64..60.0), 2..40)) {
            let s = spec();
            let mut pos = (1000.0, 1000.0);
            let mut pts = Vec::new();
            for (dx, dy) in steps {
                pos = (pos.0 + dx, pos.1 + dy);
                pts.push(offset(&s, pos.0, pos.1));
            }
            let t = traj(pts);
            let toks = to_grid_trajectory(&t, &s).unwrap();
            let mut j = 0;
            for tok in &toks {
                while j < t.points.len() && t.points[j] != tok.anchor { j += 1; }
                prop_assert!(j < t.points.len());
                j += 1;
            }
            prop_assert!(toks.windows(2).all(|w| w[0].cell_id != w[1].cell_id));
            prop_assert!(toks.iter().all(|t| t.d >= 0.0 && (0.0..360.0).contains(&t.r)));
        }
    }
}
