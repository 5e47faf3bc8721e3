use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use gridroad_core::checkpoint::{Checkpoint, RunInfo};
use gridroad_core::config::RunConfig;
use gridroad_core::data::io::{read_gps, read_jsonl, write_gps, write_jsonl};
use gridroad_core::data::{synth_world, GridSpec, IngestStats, MapMatcher, RoadNetwork, Sample, Split};
use gridroad_core::downstream::{
    binary_metrics, build_sim_benchmark, eval_similarity, finetune, mae, mape, multiclass_metrics, rmse, MetricsReport, SimBenchmark, Task,
};
use gridroad_core::gradcheck::{model_suite, op_suite};
use gridroad_core::model::{pretrain, write_loss_csv, Model, ModelConfig, ModelContext};
use gridroad_core::pipeline::{context_from, prepare, time_origin};
use gridroad_core::Error;

use crate::outputs::Outputs;
use crate::{BenchArgs, ClassifyArgs, Cli, Command, EncodeArgs, EvalSimArgs, FinetuneArgs, GradcheckArgs, IngestArgs, PretrainArgs, SynthArgs};

/// Sidecar written next to a sample cache.
#[derive(Serialize, Deserialize)]
struct CacheMeta {
    grid: GridSpec,
    stats: IngestStats,
    config: String,
    seed: u64,
}

/// A similarity benchmark with the grid its samples were mapped onto.
#[derive(Serialize, Deserialize)]
struct BenchFile {
    grid: GridSpec,
    config: String,
    benchmark: SimBenchmark,
}

#[derive(Serialize)]
struct TruthRow<'a> {
    id: &'a str,
    segments: &'a [usize],
}

#[derive(Serialize, Deserialize)]
struct VectorRow {
    id: String,
    vector: Vec<f64>,
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let from_file = cli.config.is_some();
    match &cli.command {
        Command::Synth(a) => synth(cfg, a),
        Command::Ingest(a) => ingest(cfg, a),
        Command::Pretrain(a) => pretrain_cmd(cfg, a),
        Command::FinetuneTte(a) => finetune_cmd(cfg, from_file, a, |_| Task::Tte),
        Command::FinetuneCls(ClassifyArgs { common, classes }) => {
            finetune_cmd(cfg, from_file, common, |c| Task::Classify { num_classes: classes.unwrap_or(c.synth.num_classes) })
        }
        Command::BenchSim(a) => bench_sim(cfg, a),
        Command::EvalSim(a) => eval_sim(cfg, from_file, a),
        Command::Encode(a) => encode(cfg, from_file, a),
        Command::Gradcheck(a) => gradcheck(cfg, a),
    }
}

/// Validated TOML text of the final configuration.
fn snapshot(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    Ok(cfg.to_toml()?)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_network(dir: &Path) -> Result<RoadNetwork> {
    RoadNetwork::read_csv(&dir.join("segments.csv"), &dir.join("edges.csv")).with_context(|| format!("loading network from {}", dir.display()))
}

fn load_cache(path: &Path) -> Result<(Vec<Sample>, CacheMeta)> {
    let samples: Vec<Sample> = read_jsonl(path)?;
    let meta_path = with_suffix(path, ".meta.json");
    let meta: CacheMeta = serde_json::from_reader(gridroad_core::data::io::open(&meta_path)?)
        .with_context(|| format!("reading {}", meta_path.display()))?;
    Ok((samples, meta))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

fn split(samples: &[Sample], which: Split) -> Vec<&Sample> {
    samples.iter().filter(|s| s.split == which).collect()
}

/// Loads a checkpoint and rebuilds its model. `dim` is checked when the
/// user asked for a specific representation size.
fn load_model(path: &Path, net: &RoadNetwork, dim: Option<usize>) -> Result<(Checkpoint, Model, ModelContext)> {
    let ck = Checkpoint::load(path)?;
    if let Some(d) = dim {
        ck.expect_dim(d)?;
    }
    let (model, ctx, _) = ck.restore(net)?;
    Ok((ck, model, ctx))
}

fn same_grid(ck: &GridSpec, data: &GridSpec) -> Result<()> {
    if ck != data {
        return Err(Error::Compatibility(format!("checkpoint grid {ck:?} differs from the data grid {data:?}")).into());
    }
    Ok(())
}

fn expected_dim(flag: Option<usize>, from_file: bool, cfg: &RunConfig) -> Option<usize> {
    flag.or(from_file.then_some(cfg.model.d))
}

fn synth(mut cfg: RunConfig, a: &SynthArgs) -> Result<()> {
    if let Some(n) = a.trajectories {
        cfg.synth.num_trajectories = n;
    }
    if let Some(s) = a.noise {
        cfg.synth.noise_sigma = s;
    }
    if let Some(i) = a.interval {
        cfg.synth.interval = i;
    }
    let text = snapshot(&cfg)?;
    let world = synth_world(&cfg.synth, cfg.seed)?;
    std::fs::create_dir_all(&a.out)?;
    let mut outs = Outputs::default();
    let (seg, edges) = (outs.add(&a.out.join("segments.csv")), outs.add(&a.out.join("edges.csv")));
    world.network.write_csv(&seg, &edges)?;
    write_gps(&outs.add(&a.out.join("trajectories.jsonl")), &world.trajectories)?;
    write_jsonl(
        &outs.add(&a.out.join("truth.jsonl")),
        world.trajectories.iter().zip(&world.truth).map(|(t, p)| TruthRow { id: &t.id, segments: p }),
    )?;
    std::fs::write(outs.add(&a.out.join("run.toml")), &text)?;
    outs.commit();
    log::info!("{} segments, {} trajectories written to {}", world.network.len(), world.trajectories.len(), a.out.display());
    Ok(())
}

fn ingest(mut cfg: RunConfig, a: &IngestArgs) -> Result<()> {
    if let Some(c) = a.cell_size {
        cfg.grid.cell_size = c;
    }
    let text = snapshot(&cfg)?;
    let net = load_network(&a.net.network)?;
    let mut trajs = Vec::new();
    for p in &a.gps {
        trajs.extend(read_gps(p).with_context(|| format!("reading {}", p.display()))?);
    }
    let prepared = prepare(&trajs, &net, cfg.grid.cell_size, cfg.matching.clone(), cfg.grid.utc_offset)?;
    let s = &prepared.stats;
    log::info!("kept {} of {} (too short {}, unmatched {}, off grid {})", s.kept, s.input, s.too_short, s.unmatched, s.off_grid);
    if prepared.samples.is_empty() {
        bail!(Error::Data("no trajectory survived ingestion".into()));
    }
    let mut outs = Outputs::default();
    write_jsonl(&outs.add(&a.out), &prepared.samples)?;
    let meta = CacheMeta { grid: prepared.grid, stats: prepared.stats.clone(), config: text, seed: cfg.seed };
    write_json(&outs.add(&with_suffix(&a.out, ".meta.json")), &meta)?;
    outs.commit();
    Ok(())
}

fn pretrain_cmd(mut cfg: RunConfig, a: &PretrainArgs) -> Result<()> {
    let p = &mut cfg.pretrain;
    p.epochs = a.epochs.unwrap_or(p.epochs);
    p.batch_size = a.batch_size.unwrap_or(p.batch_size);
    p.lr = a.lr.unwrap_or(p.lr);
    p.mask_ratio = a.mask_ratio.unwrap_or(p.mask_ratio);
    if a.max_steps.is_some() {
        p.max_steps = a.max_steps;
    }
    if let Some(d) = a.dim {
        cfg.model = ModelConfig { d, h: 2 * d, ..cfg.model.clone() };
    }
    if let Some(v) = a.variant {
        cfg.model.variant = v.into();
    }
    cfg.validate()?;
    let net = load_network(&a.net.network)?;
    let (samples, meta) = load_cache(&a.cache)?;
    let train = split(&samples, Split::Train);
    if train.is_empty() {
        bail!(Error::Data("the cache has no training-split samples".into()));
    }
    let ctx = context_from(meta.grid, &net, &train)?;
    cfg.model.time_origin = time_origin(&train)?;
    let text = snapshot(&cfg)?;
    let mut model = Model::new(cfg.model.clone(), &ctx, cfg.seed)?;
    log::info!("pretraining {:?} d={} on {} trajectories", cfg.model.variant, cfg.model.d, train.len());
    let records = pretrain(&mut model, &ctx, &train, &cfg.pretrain, cfg.seed, |r, _| {
        if r.step % 20 == 0 {
            log::info!("step {} epoch {} l_cl {:.4} l_mlm {:.4} l_total {:.4}", r.step, r.epoch, r.l_cl, r.l_mlm, r.l_total);
        }
        Ok(())
    })?;
    let mut outs = Outputs::default();
    let loss = outs.add(&a.loss_csv.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.csv")));
    write_loss_csv(&records, File::create(&loss)?)?;
    let out = outs.add(&a.out);
    Checkpoint::from_model(&model, &ctx, None).with_run(RunInfo { config: text, seed: cfg.seed }).save(&out)?;
    outs.commit();
    if let Some(r) = records.last() {
        log::info!("{} steps, final l_total {:.4}", r.step, r.l_total);
    }
    Ok(())
}

fn finetune_cmd(mut cfg: RunConfig, from_file: bool, a: &FinetuneArgs, task_of: impl FnOnce(&RunConfig) -> Task) -> Result<()> {
    let f = &mut cfg.finetune;
    f.epochs = a.epochs.unwrap_or(f.epochs);
    f.batch_size = a.batch_size.unwrap_or(f.batch_size);
    f.lr = a.lr.unwrap_or(f.lr);
    f.head_only |= a.head_only;
    if a.max_steps.is_some() {
        f.max_steps = a.max_steps;
    }
    let task = task_of(&cfg);
    let net = load_network(&a.net.network)?;
    let (ck, model, ctx) = load_model(&a.checkpoint, &net, expected_dim(a.dim, from_file, &cfg))?;
    if ck.task.is_some() {
        bail!(Error::Contract(format!("{} already carries a task head", a.checkpoint.display())));
    }
    let (samples, meta) = load_cache(&a.cache)?;
    same_grid(&ck.context.grid, &meta.grid)?;
    cfg.model = model.config.clone();
    let text = snapshot(&cfg)?;
    let (train, test) = (split(&samples, Split::Train), split(&samples, Split::Test));
    if test.is_empty() {
        bail!(Error::Data("the cache has no test-split samples".into()));
    }
    let mut trace = Vec::new();
    let ft = finetune(model, &ctx, &train, task, &cfg.finetune, cfg.seed, |step, loss| {
        if step % 20 == 0 {
            log::info!("step {step} loss {loss:.4}");
        }
        trace.push((step, loss));
    })?;
    let metrics: Vec<(&'static str, f64)> = match task {
        Task::Tte => {
            let pred = ft.predict_tte(&ctx, &test)?;
            let truth = test
                .iter()
                .map(|s| s.travel_time.ok_or_else(|| Error::Data(format!("{} has no travel time", s.id))))
                .collect::<Result<Vec<f64>, _>>()?;
            vec![("mae", mae(&pred, &truth)?), ("rmse", rmse(&pred, &truth)?), ("mape", mape(&pred, &truth)?)]
        }
        Task::Classify { num_classes } => {
            let pred = ft.predict_class(&ctx, &test)?;
            let truth = test
                .iter()
                .map(|s| s.label.ok_or_else(|| Error::Data(format!("{} has no label", s.id))))
                .collect::<Result<Vec<usize>, _>>()?;
            if num_classes == 2 {
                let m = binary_metrics(&pred, &truth)?;
                vec![("f1", m.f1), ("accuracy", m.accuracy), ("precision", m.precision)]
            } else {
                let m = multiclass_metrics(&pred, &truth, num_classes)?;
                vec![("micro_f1", m.micro_f1), ("macro_f1", m.macro_f1)]
            }
        }
    };
    let name = if task == Task::Tte { "tte" } else { "classification" };
    for (k, v) in &metrics {
        log::info!("{name} {k} = {v:.4}");
    }
    let report = MetricsReport::new(name, metrics, &text, cfg.seed);
    let mut outs = Outputs::default();
    let loss = outs.add(&a.loss_csv.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.csv")));
    let mut w = csv::Writer::from_path(&loss)?;
    w.write_record(["step", "loss"])?;
    for (s, l) in &trace {
        w.write_record([s.to_string(), l.to_string()])?;
    }
    w.flush()?;
    write_json(&outs.add(&a.metrics.clone().unwrap_or_else(|| with_suffix(&a.out, ".metrics.json"))), &report)?;
    let out = outs.add(&a.out);
    Checkpoint::from_finetuned(&ft, &ctx).with_run(RunInfo { config: text, seed: cfg.seed }).save(&out)?;
    outs.commit();
    Ok(())
}

fn bench_sim(mut cfg: RunConfig, a: &BenchArgs) -> Result<()> {
    let b = &mut cfg.benchmark;
    b.queries = a.queries.unwrap_or(b.queries);
    b.negatives = a.num_negatives.unwrap_or(b.negatives);
    let text = snapshot(&cfg)?;
    let net = load_network(&a.net.network)?;
    let candidates = read_gps(&a.gps)?;
    let (pool, meta) = load_cache(&a.negatives)?;
    let matcher = MapMatcher::new(&net, cfg.matching.clone());
    let bench = build_sim_benchmark(&candidates, &pool, &matcher, &meta.grid, cfg.grid.utc_offset, &cfg.benchmark, cfg.seed)?;
    log::info!("{} queries accepted from {} candidates, {} negatives", bench.accepted, bench.tried, bench.negatives.len());
    let mut outs = Outputs::default();
    write_json(&outs.add(&a.out), &BenchFile { grid: meta.grid, config: text, benchmark: bench })?;
    outs.commit();
    Ok(())
}

fn eval_sim(mut cfg: RunConfig, from_file: bool, a: &EvalSimArgs) -> Result<()> {
    let net = load_network(&a.net.network)?;
    let (ck, model, ctx) = load_model(&a.checkpoint, &net, expected_dim(a.dim, from_file, &cfg))?;
    let file: BenchFile = serde_json::from_reader(std::io::BufReader::new(gridroad_core::data::io::open(&a.bench)?))
        .with_context(|| format!("reading {}", a.bench.display()))?;
    same_grid(&ck.context.grid, &file.grid)?;
    cfg.model = model.config.clone();
    let text = snapshot(&cfg)?;
    let m = eval_similarity(&model, &ctx, &file.benchmark)?;
    log::info!("mean rank {:.3}, HR@1 {:.3}, HR@5 {:.3}", m.mean_rank, m.hr1, m.hr5);
    let report = MetricsReport::new("similarity", [("mean_rank", m.mean_rank), ("hr1", m.hr1), ("hr5", m.hr5)], &text, cfg.seed);
    let mut outs = Outputs::default();
    write_json(&outs.add(&a.out), &report)?;
    outs.commit();
    Ok(())
}

fn encode(cfg: RunConfig, from_file: bool, a: &EncodeArgs) -> Result<()> {
    let net = load_network(&a.net.network)?;
    let (ck, model, ctx) = load_model(&a.checkpoint, &net, expected_dim(a.dim, from_file, &cfg))?;
    let (samples, meta) = load_cache(&a.cache)?;
    same_grid(&ck.context.grid, &meta.grid)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let vectors = model.encode(&ctx, &refs, 64)?;
    let mut outs = Outputs::default();
    write_jsonl(
        &outs.add(&a.out),
        samples.iter().zip(vectors).map(|(s, vector)| VectorRow { id: s.id.clone(), vector }),
    )?;
    outs.commit();
    log::info!("encoded {} trajectories", samples.len());
    Ok(())
}

fn gradcheck(cfg: RunConfig, a: &GradcheckArgs) -> Result<()> {
    let mut report = op_suite(cfg.seed)?;
    report.extend(model_suite(cfg.seed, a.entries)?);
    println!("{report}");
    if let Some(p) = &a.out {
        let mut outs = Outputs::default();
        write_json(&outs.add(p), &report)?;
        outs.commit();
    }
    if !report.passed() {
        bail!("gradient check failed: max relative error {:.3e}", report.max_rel_err());
    }
    Ok(())
}
