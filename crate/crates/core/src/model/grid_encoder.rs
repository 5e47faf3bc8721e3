//! Grid encoder: a CNN over the grid feature image gives a cell table;
//! tokens fuse their cell row with local movement features, add a learned
//! time encoding and fixed positions, and pass through a Transformer.

use rand::Rng;

use super::batch::GridBatch;
use super::layers::{conv2d_same, position_rows, AttentionBlock, Linear};
use crate::error::Result;
use crate::math::{init_uniform, Graph, ParamId, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct GridEncoder {
    pub conv1_kernel: ParamId,
    pub conv1_bias: ParamId,
    pub conv2_kernel: ParamId,
    pub conv2_bias: ParamId,
    pub table1: Linear,
    pub table2: Linear,
    pub fuse: Linear,
    pub time_linear: Linear,
    pub time_periodic: Linear,
    pub cls: ParamId,
    pub blocks: Vec<AttentionBlock>,
    pub out: Linear,
    pub h: usize,
}

/// Token states `[B, L+1, d]` and the [CLS] summary `[B, d]`, plus the
/// attention weights of every layer.
pub struct EncoderOutput {
    pub tokens: Var,
    pub summary: Var,
    pub weights: Vec<Var>,
}

impl GridEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        channels: usize,
        h: usize,
        d: usize,
        layers: usize,
        heads: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let c = channels;
        Self {
            conv1_kernel: store.register("grid.conv1.kernel", init_uniform(vec![3, 3, 3, c], 27, rng)),
            conv1_bias: store.register("grid.conv1.bias", init_uniform(vec![c], 27, rng)),
            conv2_kernel: store.register("grid.conv2.kernel", init_uniform(vec![3, 3, c, c], 9 * c, rng)),
            conv2_bias: store.register("grid.conv2.bias", init_uniform(vec![c], 9 * c, rng)),
            table1: Linear::new(store, "grid.table1", c, h, rng),
            table2: Linear::new(store, "grid.table2", h, h, rng),
            fuse: Linear::new(store, "grid.fuse", h + 4, h, rng),
            time_linear: Linear::new(store, "grid.time.linear", 1, h / 2, rng),
            time_periodic: Linear::new(store, "grid.time.periodic", 1, h - h / 2, rng),
            cls: store.register("grid.cls", init_uniform(vec![h], h, rng)),
            blocks: (0..layers)
                .map(|i| AttentionBlock::new(store, &format!("grid.block{i}"), h, heads, dropout, rng))
                .collect(),
            out: Linear::new(store, "grid.out", h, d, rng),
            h,
        }
    }

    /// Cell embedding table `[H·W, h]` from the `[H, W, 3]` feature image.
    pub fn table(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let (k1, b1) = (g.param(self.conv1_kernel), g.param(self.conv1_bias));
        let x = conv2d_same(g, image, k1, b1)?;
        let x = g.relu(x);
        let (k2, b2) = (g.param(self.conv2_kernel), g.param(self.conv2_bias));
        let x = conv2d_same(g, x, k2, b2)?;
        let x = g.relu(x);
        let s = g.shape(x).to_vec();
        let x = g.reshape(x, &[s[0] * s[1], s[2]])?;
        let x = self.table1.forward(g, x)?;
        let x = g.relu(x);
        self.table2.forward(g, x)
    }

    /// `f1(t) ‖ sin(f2(t))` for `[n, 1]` scaled times.
    pub fn time2vec(&self, g: &mut Graph, times: Var) -> Result<Var> {
        let lin = self.time_linear.forward(g, times)?;
        let per = self.time_periodic.forward(g, times)?;
        let per = g.sin(per);
        g.concat_last(&[lin, per])
    }

    /// Token embeddings `[B·L, h]` before positions and [CLS]. `replace`
    /// substitutes a row (the mask embedding) at the listed token indices
    /// after feature fusion, keeping their time encoding.
    pub fn embed(&self, g: &mut Graph, table: Var, batch: &GridBatch, replace: Option<(Var, &[usize])>) -> Result<Var> {
        let e = g.gather_rows(table, &batch.cells)?;
        let feats = g.constant(batch.feats.clone());
        let x = g.concat_last(&[e, feats])?;
        let mut x = self.fuse.forward(g, x)?;
        if let Some((row, idx)) = replace {
            if !idx.is_empty() {
                x = g.replace_rows(x, row, idx)?;
            }
        }
        let times = g.constant(batch.times.clone());
        let t = self.time2vec(g, times)?;
        g.add(x, t)
    }

    pub fn forward(&self, g: &mut Graph, table: Var, batch: &GridBatch, replace: Option<(Var, &[usize])>) -> Result<EncoderOutput> {
        let (b, l, h) = (batch.b, batch.l, self.h);
        let x = self.embed(g, table, batch, replace)?;
        let x = g.reshape(x, &[b, l, h])?;
        let (p0, rest) = position_rows(l, h);
        let rest = g.constant(rest);
        let x = g.add_broadcast(x, rest)?;
        let cls = g.param(self.cls);
        let p0 = g.constant(p0);
        let cls = g.add(cls, p0)?;
        let mut x = g.prepend_row(x, cls)?;
        let mut weights = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let o = block.forward(g, x, &batch.valid, None)?;
            x = o.output;
            weights.push(o.weights);
        }
        let tokens = self.out.forward(g, x)?;
        let summary = g.select_position(tokens, 0)?;
        Ok(EncoderOutput { tokens, summary, weights })
    }
}
