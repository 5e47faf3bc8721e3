//! Cross-attention from the road stream (queries) to the grid stream
//! (keys and values).

use rand::Rng;

use super::layers::AttentionBlock;
use crate::error::{dim_err, Result};
use crate::math::{Graph, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct Interactor {
    pub blocks: Vec<AttentionBlock>,
    pub d: usize,
}

pub struct Interaction {
    /// `[B, Lr+1, d]`.
    pub tokens: Var,
    /// [CLS] row, `[B, d]`.
    pub summary: Var,
    pub weights: Vec<Var>,
}

impl Interactor {
    pub fn new(store: &mut ParamStore, d: usize, layers: usize, heads: usize, dropout: f64, rng: &mut impl Rng) -> Self {
        Self {
            blocks: (0..layers)
                .map(|i| AttentionBlock::new(store, &format!("inter.block{i}"), d, heads, dropout, rng))
                .collect(),
            d,
        }
    }

    /// `road` is `[B, Lr+1, d]`, `grid` is `[B, Lg+1, d]` with validity flags
    /// `grid_valid` (`B·(Lg+1)`).
    pub fn forward(&self, g: &mut Graph, road: Var, grid: Var, grid_valid: &[bool]) -> Result<Interaction> {
        let (sr, sg) = (g.shape(road).to_vec(), g.shape(grid).to_vec());
        if sr.len() != 3 || sg.len() != 3 || sr[2] != self.d || sg[2] != self.d || sr[0] != sg[0] {
            return Err(dim_err(format!("interactor over road {sr:?} and grid {sg:?} with d = {}", self.d)));
        }
        let mut x = road;
        let mut weights = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let o = block.forward_cross(g, x, grid, grid_valid)?;
            x = o.output;
            weights.push(o.weights);
        }
        let summary = g.select_position(x, 0)?;
        Ok(Interaction { tokens: x, summary, weights })
    }
}
