//! Central finite-difference verification of reverse-mode gradients.

use std::fmt;
use std::rc::Rc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{synth_world, MatchConfig, Sample, SynthConfig};
use crate::error::{Error, Result};
use crate::math::{Graph, Neighbourhoods, ParamStore, Tensor, Var};
use crate::model::{make_batch, MaskSettings, Model, ModelConfig, Variant};
use crate::pipeline::{context_from, prepare, time_origin};

/// Perturbation used for every central difference.
pub const FD_STEP: f64 = 1e-5;
/// Pass threshold on the relative error.
pub const MAX_REL_ERR: f64 = 1e-4;
/// Denominator floor for the relative error; below it errors are absolute.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct CheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl CheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= MAX_REL_ERR
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(CheckEntry::passed)
    }

    pub fn extend(&mut self, other: CheckReport) {
        self.entries.extend(other.entries);
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<4} {:<36} n={:<4} max_rel_err={:.3e}",
                if e.passed() { "ok" } else { "FAIL" },
                e.name,
                e.checked,
                e.max_rel_err
            )?;
        }
        write!(f, "max relative error {:.3e} (threshold {:.0e})", self.max_rel_err(), MAX_REL_ERR)
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn pick(len: usize, max_entries: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max_entries {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, max_entries).into_vec();
        v.sort_unstable();
        v
    }
}

/// Checks `f` against central differences w.r.t. each free input tensor.
///
/// `f` receives one leaf per input and must return a scalar.
pub fn check_fn<F>(name: &str, inputs: &[Tensor], max_entries: usize, seed: u64, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport::default();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        let mut entry = CheckEntry {
            name: if inputs.len() > 1 { format!("{name}[{k}]") } else { name.to_string() },
            checked: 0,
            max_rel_err: 0.0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        let mut work = inputs.to_vec();
        for j in pick(inputs[k].len(), max_entries, &mut rng) {
            let x0 = inputs[k].data()[j];
            work[k].data_mut()[j] = x0 + FD_STEP;
            let up = eval(&work)?;
            work[k].data_mut()[j] = x0 - FD_STEP;
            let down = eval(&work)?;
            work[k].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let e = rel_err(a, numeric);
            entry.checked += 1;
            if e >= entry.max_rel_err {
                entry.max_rel_err = e;
                entry.worst_analytic = a;
                entry.worst_numeric = numeric;
            }
        }
        report.entries.push(entry);
    }
    Ok(report)
}

/// Checks the gradient of a parameterised loss w.r.t. every parameter in
/// `groups` (each a list of parameter names reported together).
pub fn check_params<F>(
    store: &ParamStore,
    groups: &[(String, Vec<String>)],
    max_entries: usize,
    seed: u64,
    loss: F,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let out = loss(&mut g)?;
    let grads = g.backward(out)?;
    let analytic = g.param_grads(&grads, store);
    drop(g);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let out = loss(&mut g)?;
        Ok(g.value(out).item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = CheckReport::default();
    for (group, names) in groups {
        let mut entry = CheckEntry {
            name: group.clone(),
            checked: 0,
            max_rel_err: 0.0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for name in names {
            let Some(id) = store.id(name) else { continue };
            // Embedding tables are mostly untouched by a small batch, so
            // entries with a non-zero gradient are sampled first.
            let g = analytic[id.0].data();
            let live: Vec<usize> = (0..g.len()).filter(|&j| g[j] != 0.0).collect();
            let mut chosen: Vec<usize> = pick(live.len(), max_entries, &mut rng).into_iter().map(|k| live[k]).collect();
            chosen.extend(pick(g.len(), max_entries / 4, &mut rng));
            chosen.sort_unstable();
            chosen.dedup();
            for j in chosen {
                let x0 = store.get(id).data()[j];
                work.get_mut(id).data_mut()[j] = x0 + FD_STEP;
                let up = eval(&work)?;
                work.get_mut(id).data_mut()[j] = x0 - FD_STEP;
                let down = eval(&work)?;
                work.get_mut(id).data_mut()[j] = x0;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let a = analytic[id.0].data()[j];
                let e = rel_err(a, numeric);
                entry.checked += 1;
                if e >= entry.max_rel_err {
                    entry.max_rel_err = e;
                    entry.worst_analytic = a;
                    entry.worst_numeric = numeric;
                }
            }
        }
        report.entries.push(entry);
    }
    Ok(report)
}

/// Random `[-1, 1)` tensor.
fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Reduces `y` to a scalar through a fixed random projection.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::from_fn(g.shape(y).to_vec(), |_| rng.random_range(-1.0..1.0));
    let c = g.constant(t);
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

/// Every differentiable tape operation on small random inputs. Dropout is
/// the identity outside training and is not listed.
pub fn op_suite(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |s: &[usize]| rand_tensor(s, &mut rng);
    let mut report = CheckReport::default();
    report.extend(check_fn("matmul", &[r(&[3, 4]), r(&[4, 2])], 50, 1, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 1)
    })?);
    report.extend(check_fn("matmul_t", &[r(&[3, 4]), r(&[5, 4])], 50, 1, |g, v| {
        let y = g.matmul_t(v[0], v[1])?;
        project(g, y, 2)
    })?);
    report.extend(check_fn("bmm", &[r(&[2, 3, 4]), r(&[2, 4, 2])], 50, 1, |g, v| {
        let y = g.bmm(v[0], v[1], false)?;
        project(g, y, 3)
    })?);
    report.extend(check_fn("bmm_t", &[r(&[2, 3, 4]), r(&[2, 5, 4])], 50, 1, |g, v| {
        let y = g.bmm(v[0], v[1], true)?;
        project(g, y, 4)
    })?);
    report.extend(check_fn("add_broadcast", &[r(&[2, 3, 4]), r(&[3, 4])], 50, 1, |g, v| {
        let y = g.add_broadcast(v[0], v[1])?;
        project(g, y, 5)
    })?);
    report.extend(check_fn("mul", &[r(&[6]), r(&[6])], 50, 1, |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, 6)
    })?);
    report.extend(check_fn("scale_by", &[r(&[6]), r(&[1])], 50, 1, |g, v| {
        let y = g.scale_by(v[0], v[1])?;
        project(g, y, 7)
    })?);
    report.extend(check_fn("relu", &[r(&[10])], 50, 1, |g, v| {
        let y = g.relu(v[0]);
        project(g, y, 8)
    })?);
    report.extend(check_fn("leaky_relu", &[r(&[10])], 50, 1, |g, v| {
        let y = g.leaky_relu(v[0], 0.2);
        project(g, y, 9)
    })?);
    report.extend(check_fn("elu", &[r(&[10])], 50, 1, |g, v| {
        let y = g.elu(v[0]);
        project(g, y, 10)
    })?);
    report.extend(check_fn("sin_exp", &[r(&[10])], 50, 1, |g, v| {
        let s = g.sin(v[0]);
        let y = g.exp(s);
        project(g, y, 11)
    })?);
    let mask: Vec<bool> = (0..12).map(|i| i % 4 != 3).collect();
    report.extend(check_fn("softmax_masked", &[r(&[3, 4])], 50, 1, move |g, v| {
        let y = g.softmax_last(v[0], Some(&mask))?;
        project(g, y, 12)
    })?);
    report.extend(check_fn("layer_norm", &[r(&[3, 5]), r(&[5]), r(&[5])], 50, 1, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2])?;
        project(g, y, 13)
    })?);
    report.extend(check_fn("l2_normalize", &[r(&[3, 4])], 50, 1, |g, v| {
        let y = g.l2_normalize_rows(v[0])?;
        project(g, y, 14)
    })?);
    report.extend(check_fn("concat_reshape_transpose", &[r(&[2, 3]), r(&[2, 2])], 50, 1, |g, v| {
        let c = g.concat_last(&[v[0], v[1]])?;
        let t = g.transpose(c)?;
        let y = g.reshape(t, &[10])?;
        project(g, y, 15)
    })?);
    report.extend(check_fn("gather_rows", &[r(&[4, 3])], 50, 1, |g, v| {
        let y = g.gather_rows(v[0], &[2, 0, 2, 3])?;
        project(g, y, 16)
    })?);
    report.extend(check_fn("heads", &[r(&[2, 3, 4])], 50, 1, |g, v| {
        let s = g.split_heads(v[0], 2)?;
        let sq = g.mul(s, s)?;
        let y = g.merge_heads(sq, 2)?;
        project(g, y, 17)
    })?);
    report.extend(check_fn("im2col", &[r(&[3, 4, 2])], 50, 1, |g, v| {
        let y = g.im2col3x3(v[0])?;
        project(g, y, 18)
    })?);
    report.extend(check_fn("cross_entropy", &[r(&[4, 5])], 50, 1, |g, v| {
        g.cross_entropy_weighted(v[0], &[0, 4, 2, 2], &[0.1, 0.7, 0.2, 1.3])
    })?);
    report.extend(check_fn("cross_entropy_mean", &[r(&[3, 4])], 50, 1, |g, v| g.cross_entropy(v[0], &[3, 0, 1]))?);
    report.extend(check_fn("add_scale_mean", &[r(&[2, 3]), r(&[2, 3])], 50, 1, |g, v| {
        let s = g.add(v[0], v[1])?;
        let s = g.mul(s, v[0])?;
        let s = g.scale(s, -1.7);
        Ok(g.mean(s))
    })?);
    report.extend(check_fn("head_bias", &[r(&[4, 3, 3]), r(&[2, 3, 3])], 50, 1, |g, v| {
        let y = g.add_head_bias(v[0], v[1], 2)?;
        project(g, y, 19)
    })?);
    report.extend(check_fn("prepend_select", &[r(&[2, 3, 4]), r(&[4])], 50, 1, |g, v| {
        let p = g.prepend_row(v[0], v[1])?;
        let sq = g.mul(p, p)?;
        let c = g.select_position(sq, 0)?;
        let l = g.select_position(sq, 2)?;
        let y = g.add(c, l)?;
        project(g, y, 20)
    })?);
    report.extend(check_fn("replace_rows", &[r(&[5, 3]), r(&[3])], 50, 1, |g, v| {
        let y = g.replace_rows(v[0], v[1], &[1, 3])?;
        project(g, y, 21)
    })?);
    let graph = Rc::new(Neighbourhoods { nbrs: vec![vec![0, 1], vec![1, 2, 0], vec![2], vec![3, 0, 2]] });
    report.extend(check_fn("graph_attention", &[r(&[4, 6]), r(&[2, 3]), r(&[2, 3])], 50, 1, move |g, v| {
        let y = g.graph_attention(v[0], v[1], v[2], &graph, 2, 0.2)?;
        project(g, y, 22)
    })?);
    Ok(report)
}

/// Parameter groups of the full model, by name prefix.
pub const MODEL_GROUPS: &[(&str, &[&str])] = &[
    ("grid cnn", &["grid.conv"]),
    ("grid table mlp", &["grid.table"]),
    ("grid token fusion and time2vec", &["grid.fuse", "grid.time", "grid.cls"]),
    ("grid transformer", &["grid.block", "grid.out"]),
    ("road gat", &["road.input", "road.gat"]),
    ("minute-of-day table", &["road.day"]),
    ("day-of-week table", &["road.week"]),
    ("road type bias", &["road.types", "road.type_query", "road.type_key"]),
    ("road mask and cls", &["road.mask", "road.cls"]),
    ("road transformer", &["road.block", "road.out"]),
    ("temperature", &["log_delta"]),
    ("interactor", &["inter."]),
    ("masked road head", &["head.road"]),
    ("grid mask and cell head", &["grid.mask", "head.cell"]),
];

/// Small configuration used by the model suite.
pub fn suite_config(variant: Variant, time_origin: f64) -> ModelConfig {
    ModelConfig {
        d: 8,
        h: 16,
        conv_channels: 4,
        gat_layers: 2,
        gat_heads: 2,
        road_layers: 2,
        road_heads: 2,
        grid_layers: 2,
        grid_heads: 2,
        inter_layers: 2,
        inter_heads: 2,
        dropout: 0.0,
        variant,
        time_origin,
        ..ModelConfig::default()
    }
}

/// Finite-difference check of the pretraining loss w.r.t. every parameter
/// group, on a two-trajectory batch from a small synthetic world. The full
/// model covers all groups except the grid-only mask and head, which are
/// checked on that variant.
pub fn model_suite(seed: u64, max_entries: usize) -> Result<CheckReport> {
    let synth = SynthConfig { rows: 4, cols: 4, num_trajectories: 12, ..SynthConfig::default() };
    let world = synth_world(&synth, seed)?;
    let prepared = prepare(&world.trajectories, &world.network, 200.0, MatchConfig::default(), 0)?;
    let pair: Vec<&Sample> = prepared.samples.iter().filter(|s| s.road.len() >= 5 && s.grid.len() >= 5).take(2).collect();
    if pair.len() < 2 {
        return Err(Error::Data("gradient suite world produced fewer than two usable trajectories".into()));
    }
    let ctx = context_from(prepared.grid, &world.network, &pair)?;
    let origin = time_origin(&pair)?;
    let mask = MaskSettings { ratio: 0.4, span: 2, seed };
    let batch = make_batch(&pair, &ctx, origin, Some(mask))?;
    let mut report = CheckReport::default();
    for variant in [Variant::Full, Variant::GridOnly] {
        let model = Model::new(suite_config(variant, origin), &ctx, seed)?;
        let names = model.store.names();
        let mut groups: Vec<(String, Vec<String>)> = Vec::new();
        for (group, prefixes) in MODEL_GROUPS {
            let members: Vec<String> = names.iter().filter(|n| prefixes.iter().any(|p| n.starts_with(p))).cloned().collect();
            let wanted = match variant {
                Variant::GridOnly => *group == "grid mask and cell head",
                _ => *group != "grid mask and cell head",
            };
            if wanted && !members.is_empty() {
                groups.push((format!("{variant:?}/{group}").to_lowercase(), members));
            }
        }
        let covered: usize = groups.iter().map(|(_, m)| m.len()).sum();
        if variant == Variant::Full && covered != names.len() {
            return Err(Error::Contract(format!("{} parameters outside every gradient group", names.len() - covered)));
        }
        report.extend(check_params(&model.store, &groups, max_entries, seed, |g| {
            Ok(model.losses(g, &ctx, &batch)?.total)
        })?);
    }
    Ok(report)
}
