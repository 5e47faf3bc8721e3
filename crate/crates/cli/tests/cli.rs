use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gridroad_core::checkpoint::Checkpoint;
use gridroad_core::data::RoadNetwork;
use gridroad_core::downstream::MetricsReport;
use gridroad_core::model::Model;
use tempfile::TempDir;

const CONFIG: &str = r#"
seed = 3

[synth]
rows = 5
cols = 5
num_trajectories = 120
num_classes = 2
interval = 20.0
noise_sigma = 20.0

[grid]
cell_size = 200.0

[model]
d = 8
h = 16
conv_channels = 4
gat_layers = 2
gat_heads = 2
road_layers = 2
road_heads = 2
grid_layers = 1
grid_heads = 2
inter_layers = 1
inter_heads = 2

[pretrain]
batch_size = 8
epochs = 1
max_steps = 4

[finetune]
batch_size = 8
epochs = 1
max_steps = 3

[benchmark]
queries = 3
negatives = 20
"#;

struct World {
    dir: TempDir,
}

impl World {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_gridroad"))
            .arg("--config")
            .arg(self.path("run.toml"))
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        out
    }

    fn network(&self) -> RoadNetwork {
        RoadNetwork::read_csv(&self.path("world/segments.csv"), &self.path("world/edges.csv")).unwrap()
    }
}

/// A synthesised and ingested world in a fresh directory.
fn world() -> World {
    let w = World { dir: tempfile::tempdir().unwrap() };
    std::fs::write(w.path("run.toml"), CONFIG).unwrap();
    w.ok(&["synth", "--out", "world"]);
    w.ok(&["ingest", "--network", "world", "--gps", "world/trajectories.jsonl", "--out", "cache.jsonl"]);
    w
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

/// Loss CSV rows without the wall-clock column.
fn losses_without_time(p: &Path) -> Vec<String> {
    String::from_utf8(read(p)).unwrap().lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

#[test]
fn synth_and_ingest_write_their_artifacts() {
    let w = world();
    for f in ["segments.csv", "edges.csv", "trajectories.jsonl", "truth.jsonl", "run.toml"] {
        assert!(w.path("world").join(f).exists(), "{f}");
    }
    let meta: serde_json::Value = serde_json::from_slice(&read(&w.path("cache.jsonl.meta.json"))).unwrap();
    assert_eq!(meta["seed"], 3);
    assert!(meta["config"].as_str().unwrap().contains("num_trajectories = 120"));
    assert!(meta["stats"]["kept"].as_u64().unwrap() > 60);
}

#[test]
fn pretraining_is_reproducible() {
    let w = world();
    let args = |out: &'static str| ["pretrain", "--network", "world", "--cache", "cache.jsonl", "--out", out];
    w.ok(&args("a.ckpt"));
    w.ok(&args("b.ckpt"));
    assert_eq!(read(&w.path("a.ckpt")), read(&w.path("b.ckpt")));
    let (la, lb) = (losses_without_time(&w.path("a.ckpt.loss.csv")), losses_without_time(&w.path("b.ckpt.loss.csv")));
    assert_eq!(la[0], "step,epoch,l_cl,l_mlm,l_total");
    assert_eq!(la.len(), 5);
    assert_eq!(la, lb);
    let ck = Checkpoint::load(&w.path("a.ckpt")).unwrap();
    let run = ck.run.unwrap();
    assert_eq!(run.seed, 3);
    assert!(run.config.contains("max_steps = 4"));
}

#[test]
fn zero_epochs_yields_the_initialisation() {
    let w = world();
    w.ok(&["pretrain", "--network", "world", "--cache", "cache.jsonl", "--out", "init.ckpt", "--epochs", "0"]);
    let ck = Checkpoint::load(&w.path("init.ckpt")).unwrap();
    let (trained, ctx, _) = ck.restore(&w.network()).unwrap();
    let fresh = Model::new(ck.config.clone(), &ctx, 3).unwrap();
    assert_eq!(trained.store.values(), fresh.store.values());
    let csv = String::from_utf8(read(&w.path("init.ckpt.loss.csv"))).unwrap();
    assert_eq!(csv.trim(), "");
}

#[test]
fn downstream_commands_round_trip() {
    let w = world();
    w.ok(&["pretrain", "--network", "world", "--cache", "cache.jsonl", "--out", "pre.ckpt"]);

    for out in ["v1.jsonl", "v2.jsonl"] {
        w.ok(&["encode", "--network", "world", "--checkpoint", "pre.ckpt", "--cache", "cache.jsonl", "--out", out]);
    }
    assert_eq!(read(&w.path("v1.jsonl")), read(&w.path("v2.jsonl")));
    let first: serde_json::Value = serde_json::from_str(String::from_utf8(read(&w.path("v1.jsonl"))).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["vector"].as_array().unwrap().len(), 8);

    w.ok(&["finetune-tte", "--network", "world", "--cache", "cache.jsonl", "--checkpoint", "pre.ckpt", "--out", "tte.ckpt"]);
    let tte: MetricsReport = serde_json::from_slice(&read(&w.path("tte.ckpt.metrics.json"))).unwrap();
    assert_eq!(tte.task, "tte");
    assert_eq!(tte.seed, 3);
    assert_eq!(tte.config_hash.len(), 64);
    assert!(["mae", "rmse", "mape"].iter().all(|k| tte.metrics[*k].is_finite()));
    assert!(w.path("tte.ckpt.loss.csv").exists());
    let ck = Checkpoint::load(&w.path("tte.ckpt")).unwrap();
    assert!(ck.task.is_some());

    w.ok(&["finetune-cls", "--network", "world", "--cache", "cache.jsonl", "--checkpoint", "pre.ckpt", "--out", "cls.ckpt"]);
    let cls: MetricsReport = serde_json::from_slice(&read(&w.path("cls.ckpt.metrics.json"))).unwrap();
    assert!(cls.metrics.contains_key("f1") && cls.metrics.contains_key("accuracy"));

    w.ok(&["bench-sim", "--network", "world", "--gps", "world/trajectories.jsonl", "--negatives", "cache.jsonl", "--out", "bench.json"]);
    w.ok(&["eval-sim", "--network", "world", "--checkpoint", "pre.ckpt", "--bench", "bench.json", "--out", "sim.json"]);
    let sim: MetricsReport = serde_json::from_slice(&read(&w.path("sim.json"))).unwrap();
    let mr = sim.metrics["mean_rank"];
    assert!((1.0..=23.0).contains(&mr), "{mr}");
}

#[test]
fn failures_exit_nonzero_and_leave_nothing_behind() {
    let w = world();
    let out = w.run(&["pretrain", "--no-such-flag"]);
    assert!(!out.status.success());

    std::fs::write(w.path("bad.toml"), "[model]\nd = 8\nh = 12\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gridroad"))
        .args(["--config", "bad.toml", "synth", "--out", "w2"])
        .current_dir(w.dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));

    let out = w.run(&["bench-sim", "--network", "world", "--gps", "world/trajectories.jsonl", "--negatives", "cache.jsonl", "--out", "b.json", "--queries", "100000"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("acceptance rate"));
    assert!(!w.path("b.json").exists());

    w.ok(&["pretrain", "--network", "world", "--cache", "cache.jsonl", "--out", "pre.ckpt", "--max-steps", "1"]);
    let out = w.run(&["encode", "--network", "world", "--checkpoint", "pre.ckpt", "--cache", "cache.jsonl", "--out", "v.jsonl", "--dim", "16"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("incompatible"));
    assert!(!w.path("v.jsonl").exists());

    let out = w.run(&["encode", "--network", "world", "--checkpoint", "missing.ckpt", "--cache", "cache.jsonl", "--out", "v.jsonl"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}

#[test]
fn gradcheck_passes_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gridroad"))
        .args(["gradcheck", "--entries", "8", "--out", "report.json"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));
    let report: serde_json::Value = serde_json::from_slice(&read(&dir.path().join("report.json"))).unwrap();
    assert!(report["entries"].as_array().unwrap().len() > 20);
}
