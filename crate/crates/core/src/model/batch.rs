//! Padded batches of aligned grid and road token sequences.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::context::ModelContext;
use crate::data::road::NUM_ROAD_TYPES;
use crate::data::{plan_mask, Sample};
use crate::error::{Error, Result};
use crate::math::Tensor;

/// Type index used for [CLS] and padding positions.
pub const NEUTRAL_TYPE: usize = NUM_ROAD_TYPES;

/// Span masking applied while building a batch. Row `i` of the batch draws
/// its plan from `seed` mixed with `i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSettings {
    pub ratio: f64,
    pub span: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct GridBatch {
    pub b: usize,
    /// Longest sequence, excluding [CLS].
    pub l: usize,
    pub lengths: Vec<usize>,
    /// `b·l` cell ids; padding uses cell 0.
    pub cells: Vec<usize>,
    /// `[b·l, 4]`: normalised lon, lat, distance in km, azimuth / 360.
    pub feats: Tensor,
    /// `[b·l, 1]`: days since the configured time origin.
    pub times: Tensor,
    /// `b·(l+1)` flags, [CLS] first in each row.
    pub valid: Vec<bool>,
    /// Flat token indices (into `b·l`) hidden for masked-cell training.
    pub masked: Vec<usize>,
    pub masked_rows: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct RoadBatch {
    pub b: usize,
    pub l: usize,
    pub lengths: Vec<usize>,
    /// `b·l` segment ids; padding uses segment 0.
    pub segments: Vec<usize>,
    pub minutes: Vec<usize>,
    pub days: Vec<usize>,
    /// `b·(l+1)` type indices with [`NEUTRAL_TYPE`] at [CLS] and padding.
    pub types: Vec<usize>,
    pub valid: Vec<bool>,
    /// Flat token indices (into `b·l`) hidden for masked-road training.
    pub masked: Vec<usize>,
    /// Batch row of each masked index.
    pub masked_rows: Vec<usize>,
}

impl RoadBatch {
    pub fn masked_targets(&self) -> Vec<usize> {
        self.masked.iter().map(|&i| self.segments[i]).collect()
    }
}

impl GridBatch {
    pub fn masked_targets(&self) -> Vec<usize> {
        self.masked.iter().map(|&i| self.cells[i]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub grid: GridBatch,
    pub road: RoadBatch,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn row_seed(seed: u64, row: usize, stream: u64) -> u64 {
    seed ^ (row as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Pads and stacks samples; `mask` plans spans over both road and grid
/// sequences (each model variant uses the one it reconstructs).
pub fn make_batch(samples: &[&Sample], ctx: &ModelContext, time_origin: f64, mask: Option<MaskSettings>) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Batch("empty batch".into()));
    }
    for s in samples {
        if s.grid.is_empty() || s.road.is_empty() {
            return Err(Error::Contract(format!("trajectory {} has an empty expression", s.id)));
        }
    }
    let b = samples.len();
    let lg = samples.iter().map(|s| s.grid.len()).max().unwrap();
    let lr = samples.iter().map(|s| s.road.len()).max().unwrap();

    let mut grid = GridBatch {
        b,
        l: lg,
        lengths: samples.iter().map(|s| s.grid.len()).collect(),
        cells: vec![0; b * lg],
        feats: Tensor::zeros(vec![b * lg, 4]),
        times: Tensor::zeros(vec![b * lg, 1]),
        valid: vec![false; b * (lg + 1)],
        masked: Vec::new(),
        masked_rows: Vec::new(),
    };
    let mut road = RoadBatch {
        b,
        l: lr,
        lengths: samples.iter().map(|s| s.road.len()).collect(),
        segments: vec![0; b * lr],
        minutes: vec![0; b * lr],
        days: vec![0; b * lr],
        types: vec![NEUTRAL_TYPE; b * (lr + 1)],
        valid: vec![false; b * (lr + 1)],
        masked: Vec::new(),
        masked_rows: Vec::new(),
    };
    for (row, s) in samples.iter().enumerate() {
        grid.valid[row * (lg + 1)] = true;
        for (k, tok) in s.grid.iter().enumerate() {
            if tok.cell_id >= ctx.num_cells() {
                return Err(Error::Index(format!("cell {} outside a {}-cell grid", tok.cell_id, ctx.num_cells())));
            }
            let i = row * lg + k;
            grid.cells[i] = tok.cell_id;
            let (x, y) = ctx.grid.normalized(tok.anchor.lon, tok.anchor.lat);
            grid.feats.data_mut()[i * 4..i * 4 + 4].copy_from_slice(&[x, y, tok.d / 1000.0, tok.r / 360.0]);
            grid.times.data_mut()[i] = (tok.t - time_origin) / 86_400.0;
            grid.valid[row * (lg + 1) + 1 + k] = true;
        }
        road.valid[row * (lr + 1)] = true;
        for (k, tok) in s.road.iter().enumerate() {
            if tok.segment_id >= ctx.num_segments {
                return Err(Error::Index(format!("segment {} outside a {}-segment network", tok.segment_id, ctx.num_segments)));
            }
            let i = row * lr + k;
            road.segments[i] = tok.segment_id;
            road.minutes[i] = tok.minute_of_day;
            road.days[i] = tok.day_of_week;
            road.types[row * (lr + 1) + 1 + k] = tok.road_type;
            road.valid[row * (lr + 1) + 1 + k] = true;
        }
        if let Some(m) = mask {
            for p in plan_mask(s.road.len(), m.ratio, m.span, row_seed(m.seed, row, 0)).positions {
                road.masked.push(row * lr + p);
                road.masked_rows.push(row);
            }
            for p in plan_mask(s.grid.len(), m.ratio, m.span, row_seed(m.seed, row, 1)).positions {
                grid.masked.push(row * lg + p);
                grid.masked_rows.push(row);
            }
        }
    }
    Ok(Batch { ids: samples.iter().map(|s| s.id.clone()).collect(), grid, road })
}

/// Shuffled batches of indices; within windows of eight batches, rows are
/// sorted by `lengths` so each batch holds similar lengths.
pub fn plan_batches(lengths: &[usize], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    let bs = batch_size.max(1);
    let mut batches = Vec::new();
    for window in order.chunks(bs * 8) {
        let mut w = window.to_vec();
        w.sort_by_key(|&i| lengths[i]);
        batches.extend(w.chunks(bs).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_every_index_once() {
        let lengths: Vec<usize> = (0..103).map(|i| (i * 37) % 11 + 1).collect();
        let plan = plan_batches(&lengths, 10, 5);
        let mut all: Vec<usize> = plan.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert!(plan.iter().all(|b| b.len() <= 10));
        assert_eq!(plan, plan_batches(&lengths, 10, 5));
    }
}
