//! The assembled model: parameter layout per variant, the pretraining
//! losses and single-pass representations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::{make_batch, Batch};
use super::context::ModelContext;
use super::grid_encoder::{EncoderOutput, GridEncoder};
use super::interactor::{Interaction, Interactor};
use super::layers::Linear;
use super::losses::{contrastive_loss, mlm_loss, mlm_weights};
use super::road_encoder::RoadEncoder;
use super::{MlmNorm, ModelConfig, Variant};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::math::{init_uniform, Graph, ParamId, ParamStore, Tensor, Var};

/// Temperature bounds enforced after every update.
pub const DELTA_MIN: f64 = 0.01;
pub const DELTA_MAX: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub grid: Option<GridEncoder>,
    pub road: Option<RoadEncoder>,
    pub inter: Option<Interactor>,
    /// `d → |V|` segment classifier at masked road positions.
    pub road_head: Option<Linear>,
    /// Mask row and `d → H·W` cell classifier for the grid-only variant.
    pub grid_mask: Option<ParamId>,
    pub cell_head: Option<Linear>,
    pub log_delta: Option<ParamId>,
    pub num_segments: usize,
    pub num_cells: usize,
}

/// Everything produced by one unmasked pass.
pub struct Outputs {
    pub grid: Option<EncoderOutput>,
    pub road: Option<EncoderOutput>,
    pub fused: Option<Interaction>,
    /// Final representation `[B, d]`.
    pub rep: Var,
}

/// Scalars of one pretraining loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub cl: f64,
    pub mlm: f64,
    pub total: f64,
    /// Masked positions whose arg-max prediction equals the target.
    pub mlm_correct: usize,
    pub mlm_count: usize,
}

pub struct LossVars {
    pub cl: Var,
    pub mlm: Var,
    pub total: Var,
    pub mlm_logits: Option<Var>,
    pub mlm_targets: Vec<usize>,
}

/// Row index into `[B·(L+1)]` of flat token index `i` into `[B·L]`.
fn with_cls(i: usize, l: usize) -> usize {
    i + i / l + 1
}

impl Model {
    pub fn new(config: ModelConfig, ctx: &ModelContext, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let want_grid = c.variant != Variant::RoadOnly;
        let want_road = c.variant != Variant::GridOnly;
        let grid = want_grid.then(|| {
            GridEncoder::new(&mut store, c.conv_channels, c.h, c.d, c.grid_layers, c.grid_heads, c.dropout, &mut rng)
        });
        let road = want_road.then(|| {
            RoadEncoder::new(
                &mut store,
                c.h,
                c.d,
                c.gat_layers,
                c.gat_heads,
                c.road_layers,
                c.road_heads,
                c.dropout,
                c.type_bias,
                &mut rng,
            )
        });
        let full = c.variant == Variant::Full;
        let inter = full.then(|| Interactor::new(&mut store, c.d, c.inter_layers, c.inter_heads, c.dropout, &mut rng));
        let road_head = want_road.then(|| Linear::new(&mut store, "head.road", c.d, ctx.num_segments, &mut rng));
        let (grid_mask, cell_head) = if c.variant == Variant::GridOnly {
            (
                Some(store.register("grid.mask", init_uniform(vec![c.h], c.h, &mut rng))),
                Some(Linear::new(&mut store, "head.cell", c.d, ctx.num_cells(), &mut rng)),
            )
        } else {
            (None, None)
        };
        let log_delta = full.then(|| store.register("log_delta", Tensor::scalar(c.delta_init.ln())));
        Ok(Self {
            config,
            store,
            grid,
            road,
            inter,
            road_head,
            grid_mask,
            cell_head,
            log_delta,
            num_segments: ctx.num_segments,
            num_cells: ctx.num_cells(),
        })
    }

    pub fn delta(&self) -> Option<f64> {
        self.log_delta.map(|id| self.store.get(id).item().exp())
    }

    /// Keeps the temperature inside `[DELTA_MIN, DELTA_MAX]`.
    pub fn clamp_delta(&mut self) {
        if let Some(id) = self.log_delta {
            let v = self.store.get_mut(id);
            let x = v.item().clamp(DELTA_MIN.ln(), DELTA_MAX.ln());
            v.data_mut()[0] = x;
        }
    }

    fn check_context(&self, ctx: &ModelContext) -> Result<()> {
        if ctx.num_segments != self.num_segments || ctx.num_cells() != self.num_cells {
            return Err(Error::Compatibility(format!(
                "model built for {} segments / {} cells, context has {} / {}",
                self.num_segments,
                self.num_cells,
                ctx.num_segments,
                ctx.num_cells()
            )));
        }
        Ok(())
    }

    /// Single unmasked pass of every encoder present and the interactor.
    pub fn represent(&self, g: &mut Graph, ctx: &ModelContext, batch: &Batch) -> Result<Outputs> {
        self.check_context(ctx)?;
        let grid = match &self.grid {
            Some(enc) => {
                let image = g.constant(ctx.image.clone());
                let table = enc.table(g, image)?;
                Some(enc.forward(g, table, &batch.grid, None)?)
            }
            None => None,
        };
        let road = match &self.road {
            Some(enc) => {
                let feats = g.constant(ctx.road_features.clone());
                let table = enc.segment_table(g, feats, &ctx.neighbourhoods)?;
                Some(enc.forward(g, table, &batch.road, false)?)
            }
            None => None,
        };
        let fused = match (&self.inter, &grid, &road) {
            (Some(inter), Some(og), Some(or)) => Some(inter.forward(g, or.tokens, og.tokens, &batch.grid.valid)?),
            _ => None,
        };
        let rep = match (&fused, &grid, &road) {
            (Some(f), _, _) => f.summary,
            (None, Some(og), None) => og.summary,
            (None, None, Some(or)) => or.summary,
            _ => return Err(Error::Contract("model has no encoder".into())),
        };
        Ok(Outputs { grid, road, fused, rep })
    }

    fn mlm_weights_for(&self, rows: &[usize], lengths: &[usize]) -> Vec<f64> {
        match self.config.mlm_norm {
            MlmNorm::Masked => mlm_weights(rows, None),
            MlmNorm::Sequence => mlm_weights(rows, Some(lengths)),
        }
    }

    /// Builds the pretraining loss. The full model runs the grid encoder
    /// once, the road encoder twice (unmasked for the contrastive term,
    /// masked for reconstruction through the interactor).
    pub fn losses(&self, g: &mut Graph, ctx: &ModelContext, batch: &Batch) -> Result<LossVars> {
        self.check_context(ctx)?;
        if batch.grid.b != batch.road.b {
            return Err(Error::Batch(format!("{} grid rows vs {} road rows", batch.grid.b, batch.road.b)));
        }
        match self.config.variant {
            Variant::Full => {
                let (genc, renc) = (self.grid.as_ref().unwrap(), self.road.as_ref().unwrap());
                let image = g.constant(ctx.image.clone());
                let gtable = genc.table(g, image)?;
                let og = genc.forward(g, gtable, &batch.grid, None)?;
                let feats = g.constant(ctx.road_features.clone());
                let rtable = renc.segment_table(g, feats, &ctx.neighbourhoods)?;
                let or1 = renc.forward(g, rtable, &batch.road, false)?;
                let ld = g.param(self.log_delta.unwrap());
                let cl = contrastive_loss(g, og.summary, or1.summary, ld)?;
                let targets = batch.road.masked_targets();
                let (mlm, logits) = if targets.is_empty() {
                    (mlm_loss(g, None, &[], &[])?, None)
                } else {
                    let or2 = renc.forward(g, rtable, &batch.road, true)?;
                    let fused = self.inter.as_ref().unwrap().forward(g, or2.tokens, og.tokens, &batch.grid.valid)?;
                    let logits = self.masked_logits(g, fused.tokens, &batch.road.masked, batch.road.l, self.road_head.as_ref().unwrap())?;
                    let w = self.mlm_weights_for(&batch.road.masked_rows, &batch.road.lengths);
                    (mlm_loss(g, Some(logits), &targets, &w)?, Some(logits))
                };
                let total = g.add(cl, mlm)?;
                Ok(LossVars { cl, mlm, total, mlm_logits: logits, mlm_targets: targets })
            }
            Variant::RoadOnly => {
                let renc = self.road.as_ref().unwrap();
                let feats = g.constant(ctx.road_features.clone());
                let rtable = renc.segment_table(g, feats, &ctx.neighbourhoods)?;
                let targets = batch.road.masked_targets();
                let cl = g.constant(Tensor::scalar(0.0));
                let (mlm, logits) = if targets.is_empty() {
                    (mlm_loss(g, None, &[], &[])?, None)
                } else {
                    let or2 = renc.forward(g, rtable, &batch.road, true)?;
                    let logits = self.masked_logits(g, or2.tokens, &batch.road.masked, batch.road.l, self.road_head.as_ref().unwrap())?;
                    let w = self.mlm_weights_for(&batch.road.masked_rows, &batch.road.lengths);
                    (mlm_loss(g, Some(logits), &targets, &w)?, Some(logits))
                };
                let total = g.add(cl, mlm)?;
                Ok(LossVars { cl, mlm, total, mlm_logits: logits, mlm_targets: targets })
            }
            Variant::GridOnly => {
                let genc = self.grid.as_ref().unwrap();
                let image = g.constant(ctx.image.clone());
                let gtable = genc.table(g, image)?;
                let targets = batch.grid.masked_targets();
                let cl = g.constant(Tensor::scalar(0.0));
                let (mlm, logits) = if targets.is_empty() {
                    (mlm_loss(g, None, &[], &[])?, None)
                } else {
                    let m = g.param(self.grid_mask.unwrap());
                    let og = genc.forward(g, gtable, &batch.grid, Some((m, &batch.grid.masked)))?;
                    let logits = self.masked_logits(g, og.tokens, &batch.grid.masked, batch.grid.l, self.cell_head.as_ref().unwrap())?;
                    let w = self.mlm_weights_for(&batch.grid.masked_rows, &batch.grid.lengths);
                    (mlm_loss(g, Some(logits), &targets, &w)?, Some(logits))
                };
                let total = g.add(cl, mlm)?;
                Ok(LossVars { cl, mlm, total, mlm_logits: logits, mlm_targets: targets })
            }
        }
    }

    fn masked_logits(&self, g: &mut Graph, tokens: Var, masked: &[usize], l: usize, head: &Linear) -> Result<Var> {
        let s = g.shape(tokens).to_vec();
        let flat = g.reshape(tokens, &[s[0] * s[1], s[2]])?;
        let rows: Vec<usize> = masked.iter().map(|&i| with_cls(i, l)).collect();
        let picked = g.gather_rows(flat, &rows)?;
        head.forward(g, picked)
    }

    /// Representations for samples, computed in chunks of `chunk` rows
    /// without dropout.
    pub fn encode(&self, ctx: &ModelContext, samples: &[&Sample], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(samples.len());
        for part in samples.chunks(chunk.max(1)) {
            let batch = make_batch(part, ctx, self.config.time_origin, None)?;
            let mut g = Graph::with_params(&self.store);
            let o = self.represent(&mut g, ctx, &batch)?;
            let v = g.value(o.rep);
            out.extend((0..part.len()).map(|i| v.row(i).to_vec()));
        }
        Ok(out)
    }
}

/// Count of arg-max hits of `[M, K]` logits against targets.
pub fn argmax_hits(logits: &Tensor, targets: &[usize]) -> usize {
    let k = logits.last_dim();
    logits
        .data()
        .chunks(k)
        .zip(targets)
        .filter(|(row, &t)| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best == t
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixture::{tiny, world};
    use crate::model::MaskSettings;

    fn model(variant: Variant, fx: &crate::model::fixture::Fixture, seed: u64) -> Model {
        Model::new(tiny(variant, fx.origin), &fx.ctx, seed).unwrap()
    }

    #[test]
    fn variants_register_only_their_parts() {
        let fx = world(6, 1);
        let full = model(Variant::Full, &fx, 0);
        let road = model(Variant::RoadOnly, &fx, 0);
        let grid = model(Variant::GridOnly, &fx, 0);
        assert!(full.store.id("log_delta").is_some() && full.store.id("inter.block0.attn.query.weight").is_some());
        assert!(road.store.id("log_delta").is_none() && road.store.names().iter().all(|n| !n.starts_with("grid.")));
        assert!(grid.store.id("grid.mask").is_some() && grid.store.names().iter().all(|n| !n.starts_with("road.")));
        assert!((full.delta().unwrap() - 0.07).abs() < 1e-12);
    }

    #[test]
    fn encode_is_independent_of_padding() {
        let fx = world(12, 2);
        let m = model(Variant::Full, &fx, 3);
        let refs: Vec<&Sample> = fx.samples.iter().collect();
        let together = m.encode(&fx.ctx, &refs, 64).unwrap();
        let alone = m.encode(&fx.ctx, &refs, 1).unwrap();
        for (a, b) in together.iter().zip(&alone) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn encode_matches_the_training_path() {
        // forward-1 grid tokens and unmasked road tokens, then the interactor
        let fx = world(6, 4);
        let m = model(Variant::Full, &fx, 5);
        let refs: Vec<&Sample> = fx.samples.iter().take(4).collect();
        let batch = make_batch(&refs, &fx.ctx, m.config.time_origin, None).unwrap();
        let mut g = Graph::with_params(&m.store);
        let image = g.constant(fx.ctx.image.clone());
        let gt = m.grid.as_ref().unwrap().table(&mut g, image).unwrap();
        let og = m.grid.as_ref().unwrap().forward(&mut g, gt, &batch.grid, None).unwrap();
        let feats = g.constant(fx.ctx.road_features.clone());
        let rt = m.road.as_ref().unwrap().segment_table(&mut g, feats, &fx.ctx.neighbourhoods).unwrap();
        let or = m.road.as_ref().unwrap().forward(&mut g, rt, &batch.road, false).unwrap();
        let f = m.inter.as_ref().unwrap().forward(&mut g, or.tokens, og.tokens, &batch.grid.valid).unwrap();
        let direct = g.value(f.summary).clone();
        let enc = m.encode(&fx.ctx, &refs, 4).unwrap();
        for (i, row) in enc.iter().enumerate() {
            assert_eq!(row.as_slice(), direct.row(i));
        }
    }

    #[test]
    fn losses_are_finite_for_every_variant() {
        let fx = world(8, 6);
        let refs: Vec<&Sample> = fx.samples.iter().take(5).collect();
        for v in [Variant::Full, Variant::RoadOnly, Variant::GridOnly] {
            let m = model(v, &fx, 7);
            let batch = make_batch(&refs, &fx.ctx, m.config.time_origin, Some(MaskSettings { ratio: 0.2, span: 2, seed: 1 })).unwrap();
            let mut g = Graph::with_params(&m.store);
            let lv = m.losses(&mut g, &fx.ctx, &batch).unwrap();
            let (cl, mlm, total) = (g.value(lv.cl).item(), g.value(lv.mlm).item(), g.value(lv.total).item());
            assert!(mlm > 0.0 && total.is_finite(), "{v:?}");
            assert_eq!(cl + mlm, total);
            if v == Variant::Full {
                assert!(cl > 0.0);
            } else {
                assert_eq!(cl, 0.0);
            }
            let grads = g.backward(lv.total).unwrap();
            let pg = g.param_grads(&grads, &m.store);
            assert!(pg.iter().all(|t| t.is_finite()));
        }
    }

    #[test]
    fn masked_gather_skips_cls() {
        assert_eq!(with_cls(0, 5), 1);
        assert_eq!(with_cls(4, 5), 5);
        assert_eq!(with_cls(5, 5), 7);
    }

    #[test]
    fn delta_is_clamped() {
        let fx = world(4, 8);
        let mut m = model(Variant::Full, &fx, 0);
        let id = m.log_delta.unwrap();
        m.store.get_mut(id).data_mut()[0] = 3.0;
        m.clamp_delta();
        assert_eq!(m.delta().unwrap(), 1.0);
        m.store.get_mut(id).data_mut()[0] = -9.0;
        m.clamp_delta();
        assert!((m.delta().unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn context_mismatch_is_rejected() {
        let fx = world(4, 9);
        let mut m = model(Variant::Full, &fx, 0);
        m.num_segments += 1;
        let refs: Vec<&Sample> = fx.samples.iter().take(1).collect();
        assert!(matches!(m.encode(&fx.ctx, &refs, 1), Err(Error::Compatibility(_))));
    }
}
