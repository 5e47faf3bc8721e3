//! Travel-time and classification heads fine-tuned together with the
//! pretrained model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::math::{adam_step, clip_grad_norm, AdamState, Graph, Tensor, Var};
use crate::model::layers::Linear;
use crate::model::{make_batch, plan_batches, Model, ModelContext};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Task {
    /// Travel time in minutes.
    Tte,
    Classify { num_classes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub grad_clip: f64,
    /// Update only the head; the encoders stay frozen.
    pub head_only: bool,
    pub max_steps: Option<u64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { batch_size: 64, epochs: 20, lr: 1e-4, grad_clip: 1.0, head_only: false, max_steps: None }
    }
}

/// `d → h → 1` MLP for travel time, or a single `d → K` layer.
#[derive(Clone, Debug)]
pub struct Head {
    pub task: Task,
    pub layers: Vec<Linear>,
}

impl Head {
    pub fn new(model: &mut Model, task: Task, seed: u64) -> Result<Self> {
        let (d, h) = (model.config.d, model.config.h);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = &mut model.store;
        let layers = match task {
            Task::Tte => vec![Linear::new(store, "tte.fc1", d, h, &mut rng), Linear::new(store, "tte.fc2", h, 1, &mut rng)],
            Task::Classify { num_classes } => {
                if num_classes < 2 {
                    return Err(Error::Config(format!("classification needs at least 2 classes, got {num_classes}")));
                }
                vec![Linear::new(store, "cls.fc", d, num_classes, &mut rng)]
            }
        };
        Ok(Self { task, layers })
    }

    pub fn forward(&self, g: &mut Graph, rep: Var) -> Result<Var> {
        let mut x = rep;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = g.relu(x);
            }
            x = layer.forward(g, x)?;
        }
        Ok(x)
    }

    fn param_prefix(&self) -> &'static str {
        match self.task {
            Task::Tte => "tte.",
            Task::Classify { .. } => "cls.",
        }
    }
}

/// Copy of `s` in which every token carries the start time: grid tokens take
/// the first timestamp, road tokens the first minute-of-day and weekday.
pub fn start_time_only(s: &Sample) -> Sample {
    let mut out = s.clone();
    let t0 = s.grid[0].t;
    for tok in &mut out.grid {
        tok.t = t0;
    }
    let first = s.road[0];
    for tok in &mut out.road {
        tok.t = first.t;
        tok.minute_of_day = first.minute_of_day;
        tok.day_of_week = first.day_of_week;
    }
    out
}

fn prepared(task: Task, samples: &[&Sample]) -> Vec<Sample> {
    match task {
        Task::Tte => samples.iter().map(|s| start_time_only(s)).collect(),
        Task::Classify { .. } => samples.iter().map(|s| (*s).clone()).collect(),
    }
}

fn targets(task: Task, samples: &[&Sample]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| match task {
            Task::Tte => s.travel_time.ok_or_else(|| Error::Data(format!("{} has no travel time", s.id))),
            Task::Classify { num_classes } => match s.label {
                Some(c) if c < num_classes => Ok(c as f64),
                Some(c) => Err(Error::Data(format!("{} has label {c} outside {num_classes} classes", s.id))),
                None => Err(Error::Data(format!("{} has no label", s.id))),
            },
        })
        .collect()
}

/// A pretrained model with a task head registered in its parameter store.
#[derive(Clone, Debug)]
pub struct Finetuned {
    pub model: Model,
    pub head: Head,
}

impl Finetuned {
    /// Head outputs: `[N]` minutes or `[N·K]` logits.
    fn outputs(&self, ctx: &ModelContext, samples: &[&Sample], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let samples = prepared(self.head.task, samples);
        let mut out = Vec::with_capacity(samples.len());
        for part in samples.chunks(chunk.max(1)) {
            let refs: Vec<&Sample> = part.iter().collect();
            let batch = make_batch(&refs, ctx, self.model.config.time_origin, None)?;
            let mut g = Graph::with_params(&self.model.store);
            let o = self.model.represent(&mut g, ctx, &batch)?;
            let y = self.head.forward(&mut g, o.rep)?;
            let v = g.value(y);
            out.extend((0..part.len()).map(|i| v.row(i).to_vec()));
        }
        Ok(out)
    }

    pub fn predict_tte(&self, ctx: &ModelContext, samples: &[&Sample]) -> Result<Vec<f64>> {
        if self.head.task != Task::Tte {
            return Err(Error::Contract("not a travel-time head".into()));
        }
        Ok(self.outputs(ctx, samples, 64)?.into_iter().map(|r| r[0]).collect())
    }

    pub fn predict_class(&self, ctx: &ModelContext, samples: &[&Sample]) -> Result<Vec<usize>> {
        if self.head.task == Task::Tte {
            return Err(Error::Contract("not a classification head".into()));
        }
        Ok(self
            .outputs(ctx, samples, 64)?
            .into_iter()
            .map(|r| (0..r.len()).fold(0, |b, j| if r[j] > r[b] { j } else { b }))
            .collect())
    }
}

/// Loss of one batch: mean squared error in minutes, or cross-entropy.
fn task_loss(g: &mut Graph, task: Task, out: Var, y: &[f64]) -> Result<Var> {
    match task {
        Task::Tte => {
            let neg = g.constant(Tensor::new(vec![y.len(), 1], y.iter().map(|v| -v).collect())?);
            let diff = g.add(out, neg)?;
            let sq = g.mul(diff, diff)?;
            Ok(g.mean(sq))
        }
        Task::Classify { .. } => {
            let t: Vec<usize> = y.iter().map(|&c| c as usize).collect();
            g.cross_entropy(out, &t)
        }
    }
}

/// Per-step training losses are passed to `on_step`.
pub fn finetune(
    mut model: Model,
    ctx: &ModelContext,
    train: &[&Sample],
    task: Task,
    cfg: &FinetuneConfig,
    seed: u64,
    mut on_step: impl FnMut(u64, f64),
) -> Result<Finetuned> {
    if train.is_empty() {
        return Err(Error::Data("no fine-tuning samples".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("fine-tune batch size {} / lr {}", cfg.batch_size, cfg.lr)));
    }
    let y = targets(task, train)?;
    let head = Head::new(&mut model, task, seed ^ 0x5EED)?;
    if task == Task::Tte {
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let b = head.layers[1].bias.unwrap();
        model.store.get_mut(b).data_mut()[0] = mean;
    }
    let data = prepared(task, train);
    let trainable: Vec<bool> = model
        .store
        .names()
        .iter()
        .map(|n| !cfg.head_only || n.starts_with(head.param_prefix()))
        .collect();
    let mut adam = AdamState::new(model.store.values(), cfg.lr);
    let lengths: Vec<usize> = data.iter().map(|s| s.road.len()).collect();
    let mut step = 0u64;
    'outer: for epoch in 0..cfg.epochs {
        for idx in plan_batches(&lengths, cfg.batch_size, seed.wrapping_add(epoch as u64)) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'outer;
            }
            let rows: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
            let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let batch = make_batch(&rows, ctx, model.config.time_origin, None)?;
            let (loss, mut grads) = {
                let mut g = Graph::with_params(&model.store);
                if model.config.dropout > 0.0 {
                    g.enable_dropout(ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
                }
                let o = model.represent(&mut g, ctx, &batch)?;
                let out = head.forward(&mut g, o.rep)?;
                let l = task_loss(&mut g, task, out, &ys)?;
                let gr = g.backward(l)?;
                (g.value(l).item(), g.param_grads(&gr, &model.store))
            };
            if !loss.is_finite() {
                return Err(Error::Graph(format!("non-finite fine-tuning loss at step {step}")));
            }
            for (gr, &t) in grads.iter_mut().zip(&trainable) {
                if !t {
                    gr.data_mut().fill(0.0);
                }
            }
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut grads, cfg.grad_clip);
            }
            adam_step(model.store.values_mut(), &grads, &mut adam)?;
            model.clamp_delta();
            step += 1;
            on_step(step, loss);
        }
    }
    Ok(Finetuned { model, head })
}
