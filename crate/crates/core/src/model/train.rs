//! Pretraining loop.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{make_batch, plan_batches, Batch, MaskSettings};
use super::context::ModelContext;
use super::network::{argmax_hits, Model, StepLosses};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::math::{adam_step, clip_grad_norm, AdamState, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub mask_ratio: f64,
    pub span: usize,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    /// Stop after this many steps regardless of `epochs`.
    pub max_steps: Option<u64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { batch_size: 128, epochs: 30, lr: 2e-4, mask_ratio: 0.2, span: 2, grad_clip: 1.0, max_steps: None }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.span == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "batch size {}, span {}, learning rate {}",
                self.batch_size, self.span, self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) || self.grad_clip < 0.0 {
            return Err(Error::Config(format!("mask ratio {} / grad clip {}", self.mask_ratio, self.grad_clip)));
        }
        Ok(())
    }

    pub fn mask(&self, seed: u64) -> MaskSettings {
        MaskSettings { ratio: self.mask_ratio, span: self.span, seed }
    }
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub l_cl: f64,
    pub l_mlm: f64,
    pub l_total: f64,
    pub wall_ms: u64,
}

pub struct TrainState {
    pub adam: AdamState,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: &Model, lr: f64, seed: u64) -> Self {
        Self { adam: AdamState::new(model.store.values(), lr), step: 0, seed }
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Forward, backward and one Adam update on a prepared batch.
pub fn train_step(model: &mut Model, ctx: &ModelContext, batch: &Batch, state: &mut TrainState, grad_clip: f64) -> Result<StepLosses> {
    let (losses, mut grads) = {
        let mut g = Graph::with_params(&model.store);
        if model.config.dropout > 0.0 {
            g.enable_dropout(ChaCha8Rng::seed_from_u64(mix(state.seed, state.step, 1)));
        }
        let lv = model.losses(&mut g, ctx, batch)?;
        let mut out = StepLosses {
            cl: g.value(lv.cl).item(),
            mlm: g.value(lv.mlm).item(),
            total: g.value(lv.total).item(),
            mlm_correct: 0,
            mlm_count: lv.mlm_targets.len(),
        };
        if let Some(l) = lv.mlm_logits {
            out.mlm_correct = argmax_hits(g.value(l), &lv.mlm_targets);
        }
        if !out.total.is_finite() {
            return Err(Error::Graph(format!("non-finite loss at step {}", state.step)));
        }
        let grads = g.backward(lv.total)?;
        (out, g.param_grads(&grads, &model.store))
    };
    if grad_clip > 0.0 {
        clip_grad_norm(&mut grads, grad_clip);
    }
    adam_step(model.store.values_mut(), &grads, &mut state.adam)?;
    model.clamp_delta();
    state.step += 1;
    Ok(losses)
}

/// Runs pretraining over `samples`. `on_step` sees every record as it is
/// produced; returning an error aborts the run.
pub fn pretrain(
    model: &mut Model,
    ctx: &ModelContext,
    samples: &[&Sample],
    cfg: &PretrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&LossRecord, &StepLosses) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let mut state = TrainState::new(model, cfg.lr, seed);
    let lengths: Vec<usize> = samples.iter().map(|s| s.road.len()).collect();
    let start = Instant::now();
    let mut records = Vec::new();
    'outer: for epoch in 0..cfg.epochs {
        for idx in plan_batches(&lengths, cfg.batch_size, mix(seed, epoch as u64, 2)) {
            if cfg.max_steps.is_some_and(|m| state.step >= m) {
                break 'outer;
            }
            let rows: Vec<&Sample> = idx.iter().map(|&i| samples[i]).collect();
            let batch = make_batch(&rows, ctx, model.config.time_origin, Some(cfg.mask(mix(seed, state.step, 3))))?;
            let losses = train_step(model, ctx, &batch, &mut state, cfg.grad_clip)?;
            let rec = LossRecord {
                step: state.step,
                epoch,
                l_cl: losses.cl,
                l_mlm: losses.mlm,
                l_total: losses.total,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            on_step(&rec, &losses)?;
            records.push(rec);
        }
    }
    Ok(records)
}

/// Writes loss records as CSV with a header row.
pub fn write_loss_csv(records: &[LossRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixture::{tiny, world};
    use crate::model::Variant;

    #[test]
    fn same_seed_same_trace_and_parameters() {
        let fx = world(16, 31);
        let refs: Vec<&Sample> = fx.samples.iter().collect();
        let mut cfg = tiny(Variant::Full, fx.origin);
        cfg.dropout = 0.1;
        let pc = PretrainConfig { batch_size: 4, epochs: 2, ..Default::default() };
        let run = || {
            let mut m = Model::new(cfg.clone(), &fx.ctx, 5).unwrap();
            let r = pretrain(&mut m, &fx.ctx, &refs, &pc, 9, |_, _| Ok(())).unwrap();
            (r.iter().map(|x| x.l_total.to_bits()).collect::<Vec<_>>(), m.store.values().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_mask_ratio_leaves_only_the_contrastive_term() {
        let fx = world(8, 32);
        let refs: Vec<&Sample> = fx.samples.iter().collect();
        let mut m = Model::new(tiny(Variant::Full, fx.origin), &fx.ctx, 1).unwrap();
        let pc = PretrainConfig { batch_size: 4, epochs: 1, mask_ratio: 0.0, ..Default::default() };
        for r in pretrain(&mut m, &fx.ctx, &refs, &pc, 0, |_, _| Ok(())).unwrap() {
            assert_eq!(r.l_mlm, 0.0);
            assert_eq!(r.l_total, r.l_cl);
        }
    }

    #[test]
    fn fixed_batch_loss_strictly_decreases() {
        let fx = world(40, 33);
        let refs: Vec<&Sample> = fx.samples.iter().take(32).collect();
        let mut m = Model::new(tiny(Variant::Full, fx.origin), &fx.ctx, 2).unwrap();
        let batch = make_batch(&refs, &fx.ctx, fx.origin, Some(MaskSettings { ratio: 0.2, span: 2, seed: 3 })).unwrap();
        let mut state = TrainState::new(&m, 2e-4, 0);
        let losses: Vec<f64> = (0..20).map(|_| train_step(&mut m, &fx.ctx, &batch, &mut state, 1.0).unwrap().total).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn loss_csv_has_expected_columns() {
        let rec = LossRecord { step: 1, epoch: 0, l_cl: 0.5, l_mlm: 1.5, l_total: 2.0, wall_ms: 7 };
        let mut buf = Vec::new();
        write_loss_csv(&[rec], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "step,epoch,l_cl,l_mlm,l_total,wall_ms");
        assert_eq!(text.lines().nth(1).unwrap(), "1,0,0.5,1.5,2.0,7");
    }
}
