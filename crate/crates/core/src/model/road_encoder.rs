//! Road encoder: graph attention over the network gives segment
//! embeddings; tokens add minute-of-day, day-of-week and position terms;
//! a Transformer whose attention scores carry a road-type bias encodes the
//! sequence.

use std::rc::Rc;

use rand::Rng;

use super::batch::RoadBatch;
use super::context::ROAD_FEATURES;
use super::grid_encoder::EncoderOutput;
use super::layers::{position_rows, AttentionBlock, Linear};
use crate::data::road::NUM_ROAD_TYPES;
use crate::error::Result;
use crate::math::{init_uniform, Graph, Neighbourhoods, ParamId, ParamStore, Tensor, Var};

pub const MINUTES_PER_DAY: usize = 1440;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct GatLayer {
    pub linear: Linear,
    pub att_src: ParamId,
    pub att_dst: ParamId,
    pub bias: ParamId,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct RoadEncoder {
    pub input: Linear,
    pub gat: Vec<GatLayer>,
    pub day: ParamId,
    pub week: ParamId,
    /// `NUM_ROAD_TYPES + 1` rows; the last is the neutral type.
    pub types: ParamId,
    pub type_query: Linear,
    pub type_key: Linear,
    pub mask: ParamId,
    pub cls: ParamId,
    pub blocks: Vec<AttentionBlock>,
    pub out: Linear,
    pub h: usize,
    pub use_type_bias: bool,
}

/// Names of the parameters that produce the road-type attention bias.
pub const TYPE_BIAS_PARAMS: [&str; 3] = ["road.types", "road.type_query.weight", "road.type_key.weight"];

impl RoadEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        h: usize,
        d: usize,
        gat_layers: usize,
        gat_heads: usize,
        layers: usize,
        heads: usize,
        dropout: f64,
        use_type_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let dh = h / gat_heads;
        let gat = (0..gat_layers)
            .map(|i| GatLayer {
                linear: Linear::no_bias(store, &format!("road.gat{i}.linear"), h, h, rng),
                att_src: store.register(format!("road.gat{i}.att_src"), init_uniform(vec![gat_heads, dh], dh, rng)),
                att_dst: store.register(format!("road.gat{i}.att_dst"), init_uniform(vec![gat_heads, dh], dh, rng)),
                bias: store.register(format!("road.gat{i}.bias"), Tensor::zeros(vec![h])),
                heads: gat_heads,
            })
            .collect();
        Self {
            input: Linear::new(store, "road.input", ROAD_FEATURES, h, rng),
            gat,
            day: store.register("road.day", init_uniform(vec![MINUTES_PER_DAY, h], h, rng)),
            week: store.register("road.week", init_uniform(vec![7, h], h, rng)),
            types: store.register("road.types", init_uniform(vec![NUM_ROAD_TYPES + 1, h], h, rng)),
            type_query: Linear::no_bias(store, "road.type_query", h, h, rng),
            type_key: Linear::no_bias(store, "road.type_key", h, h, rng),
            mask: store.register("road.mask", init_uniform(vec![h], h, rng)),
            cls: store.register("road.cls", init_uniform(vec![h], h, rng)),
            blocks: (0..layers)
                .map(|i| AttentionBlock::new(store, &format!("road.block{i}"), h, heads, dropout, rng))
                .collect(),
            out: Linear::new(store, "road.out", h, d, rng),
            h,
            use_type_bias,
        }
    }

    /// Segment embeddings `[|V|, h]`: a linear map of the feature matrix,
    /// then graph-attention layers with ELU between them.
    pub fn segment_table(&self, g: &mut Graph, features: Var, nbrs: &Rc<Neighbourhoods>) -> Result<Var> {
        let mut x = self.input.forward(g, features)?;
        for (i, layer) in self.gat.iter().enumerate() {
            if i > 0 {
                x = g.elu(x);
            }
            let z = layer.linear.forward(g, x)?;
            let (s, t) = (g.param(layer.att_src), g.param(layer.att_dst));
            let y = g.graph_attention(z, s, t, nbrs, layer.heads, LEAKY_SLOPE)?;
            let b = g.param(layer.bias);
            x = g.add_broadcast(y, b)?;
        }
        Ok(x)
    }

    /// `[B, L+1, L+1]` bias `(E_o + P) W_q ((E_o + P) W_k)ᵀ / √h` from the
    /// type sequence (with the neutral type at [CLS] and padding).
    pub fn type_bias(&self, g: &mut Graph, types: &[usize], b: usize, l1: usize) -> Result<Var> {
        let h = self.h;
        let table = g.param(self.types);
        let e = g.gather_rows(table, types)?;
        let e = g.reshape(e, &[b, l1, h])?;
        let (p0, rest) = position_rows(l1 - 1, h);
        let mut pos = p0.into_data();
        pos.extend_from_slice(rest.data());
        let pos = g.constant(Tensor::new(vec![l1, h], pos)?);
        let e = g.add_broadcast(e, pos)?;
        let q = self.type_query.forward(g, e)?;
        let k = self.type_key.forward(g, e)?;
        let a = g.bmm(q, k, true)?;
        Ok(g.scale(a, 1.0 / (h as f64).sqrt()))
    }

    /// Token embeddings `[B·L, h]`: segment row (or the mask row at masked
    /// indices) plus minute-of-day and day-of-week rows.
    pub fn embed(&self, g: &mut Graph, seg_table: Var, batch: &RoadBatch, apply_mask: bool) -> Result<Var> {
        let mut e = g.gather_rows(seg_table, &batch.segments)?;
        if apply_mask && !batch.masked.is_empty() {
            let m = g.param(self.mask);
            e = g.replace_rows(e, m, &batch.masked)?;
        }
        let (day, week) = (g.param(self.day), g.param(self.week));
        let td = g.gather_rows(day, &batch.minutes)?;
        let tw = g.gather_rows(week, &batch.days)?;
        let x = g.add(e, td)?;
        g.add(x, tw)
    }

    pub fn forward(&self, g: &mut Graph, seg_table: Var, batch: &RoadBatch, apply_mask: bool) -> Result<EncoderOutput> {
        let (b, l, h) = (batch.b, batch.l, self.h);
        let x = self.embed(g, seg_table, batch, apply_mask)?;
        let x = g.reshape(x, &[b, l, h])?;
        let (p0, rest) = position_rows(l, h);
        let rest = g.constant(rest);
        let x = g.add_broadcast(x, rest)?;
        let cls = g.param(self.cls);
        let p0 = g.constant(p0);
        let cls = g.add(cls, p0)?;
        let mut x = g.prepend_row(x, cls)?;
        let bias = if self.use_type_bias { Some(self.type_bias(g, &batch.types, b, l + 1)?) } else { None };
        let mut weights = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let o = block.forward(g, x, &batch.valid, bias)?;
            x = o.output;
            weights.push(o.weights);
        }
        let tokens = self.out.forward(g, x)?;
        let summary = g.select_position(tokens, 0)?;
        Ok(EncoderOutput { tokens, summary, weights })
    }
}
