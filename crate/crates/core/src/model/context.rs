//! Fixed, data-derived inputs shared by every forward pass: the grid feature
//! image, the road feature matrix and the attention neighbourhoods.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::data::road::NUM_ROAD_TYPES;
use crate::data::{GridSpec, RoadNetwork};
use crate::error::{dim_err, Result};
use crate::math::{Neighbourhoods, Tensor};

pub const ROAD_FEATURES: usize = 6 + NUM_ROAD_TYPES;

/// Everything a model needs besides its parameters. The serialisable part
/// (grid and flow) travels in checkpoints; the road part is rebuilt from
/// the network files.
#[derive(Clone, Debug)]
pub struct ModelContext {
    pub grid: GridSpec,
    pub flow: Vec<f64>,
    pub image: Tensor,
    pub road_features: Tensor,
    pub neighbourhoods: Rc<Neighbourhoods>,
    pub num_segments: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextSnapshot {
    pub grid: GridSpec,
    pub flow: Vec<f64>,
}

impl ModelContext {
    pub fn new(grid: GridSpec, flow: Vec<f64>, net: &RoadNetwork) -> Result<Self> {
        let image = build_grid_image(&grid, &flow)?;
        Ok(Self {
            grid,
            flow,
            image,
            road_features: road_features(net),
            neighbourhoods: Rc::new(neighbourhoods(net)),
            num_segments: net.len(),
        })
    }

    pub fn snapshot(&self) -> ContextSnapshot {
        ContextSnapshot { grid: self.grid, flow: self.flow.clone() }
    }

    pub fn num_cells(&self) -> usize {
        self.grid.num_cells()
    }
}

/// `[H, W, 3]` image: cell-centre lon and lat min-max normalised over the
/// grid, and `log1p(flow)` divided by its maximum. Row 0 is the southern
/// edge.
pub fn build_grid_image(spec: &GridSpec, flow: &[f64]) -> Result<Tensor> {
    let n = spec.num_cells();
    if flow.len() != n {
        return Err(dim_err(format!("flow has {} entries for a {}x{} grid", flow.len(), spec.rows, spec.cols)));
    }
    let centers: Vec<(f64, f64)> = (0..n).map(|i| spec.cell_center(i)).collect();
    let minmax = |f: &dyn Fn(&(f64, f64)) -> f64| {
        centers.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (lon0, lon1) = minmax(&|c| c.0);
    let (lat0, lat1) = minmax(&|c| c.1);
    let norm = |v: f64, lo: f64, hi: f64| if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
    let logf: Vec<f64> = flow.iter().map(|f| f.max(0.0).ln_1p()).collect();
    let fmax = logf.iter().copied().fold(0.0, f64::max);
    let mut data = Vec::with_capacity(n * 3);
    for (i, c) in centers.iter().enumerate() {
        data.push(norm(c.0, lon0, lon1));
        data.push(norm(c.1, lat0, lat1));
        data.push(if fmax > 0.0 { logf[i] / fmax } else { 0.0 });
    }
    Tensor::new(vec![spec.rows, spec.cols, 3], data)
}

/// `[|V|, 14]`: maxspeed, average travel time, direction, out-degree,
/// in-degree and length, each min-max normalised over the network, then a
/// one-hot road type.
pub fn road_features(net: &RoadNetwork) -> Tensor {
    let n = net.len();
    let cols: [Vec<f64>; 6] = [
        net.segments.iter().map(|s| s.maxspeed).collect(),
        net.segments.iter().map(|s| s.avg_travel_time).collect(),
        net.segments.iter().map(|s| s.direction as f64).collect(),
        net.segments.iter().map(|s| s.out_degree as f64).collect(),
        net.segments.iter().map(|s| s.in_degree as f64).collect(),
        net.segments.iter().map(|s| s.length).collect(),
    ];
    let mut t = Tensor::zeros(vec![n, ROAD_FEATURES]);
    for (k, col) in cols.iter().enumerate() {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (i, v) in col.iter().enumerate() {
            t.set(&[i, k], if hi > lo { (v - lo) / (hi - lo) } else { 0.0 });
        }
    }
    for (i, s) in net.segments.iter().enumerate() {
        t.set(&[i, 6 + s.road_type], 1.0);
    }
    t
}

/// Segment `i` attends over itself and every segment leading into it.
pub fn neighbourhoods(net: &RoadNetwork) -> Neighbourhoods {
    Neighbourhoods {
        nbrs: (0..net.len())
            .map(|i| {
                let mut v = vec![i];
                v.extend(net.pred[i].iter().copied().filter(|&j| j != i));
                v
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::road::tests::toy;

    #[test]
    fn image_channels() {
        let spec = GridSpec::new(-8.6, 41.1, 100.0, 3, 4).unwrap();
        let img = build_grid_image(&spec, &[0.0; 12]).unwrap();
        assert_eq!(img.shape(), &[3, 4, 3]);
        assert!((0..12).all(|i| img.data()[i * 3 + 2] == 0.0));
        assert_eq!((img.get(&[0, 0, 0]), img.get(&[0, 0, 1])), (0.0, 0.0));
        assert!((img.get(&[2, 3, 0]) - 1.0).abs() < 1e-12 && (img.get(&[2, 3, 1]) - 1.0).abs() < 1e-12);
        let mut flow = vec![1.0; 12];
        flow[7] = 40.0;
        let img = build_grid_image(&spec, &flow).unwrap();
        assert_eq!(img.get(&[1, 3, 2]), 1.0);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(build_grid_image(&spec, &[0.0; 11]).is_err());
    }

    #[test]
    fn feature_rows() {
        let net = toy();
        let f = road_features(&net);
        assert_eq!(f.shape(), &[5, 14]);
        for i in 0..5 {
            assert_eq!(f.row(i)[6..].iter().sum::<f64>(), 1.0);
            assert!(f.row(i)[..6].iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(f.get(&[4, 5]), 1.0);
        let nb = neighbourhoods(&net);
        assert_eq!(nb.nbrs[3], vec![3, 2, 4]);
        assert_eq!(nb.nbrs[0], vec![0]);
    }
}
