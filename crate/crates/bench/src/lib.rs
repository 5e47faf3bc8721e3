//! Shared setup for the criterion benchmarks in `benches/`.

use gridroad_core::data::{synth_world, MatchConfig, Sample, SynthConfig, SynthWorld};
use gridroad_core::model::{ModelConfig, ModelContext};
use gridroad_core::pipeline::{context_from, prepare, time_origin};

pub struct Setup {
    pub world: SynthWorld,
    pub samples: Vec<Sample>,
    pub ctx: ModelContext,
    pub origin: f64,
}

/// Default-sized synthetic world with `n` trajectories at 10 m noise.
pub fn setup(n: usize, seed: u64) -> Setup {
    let cfg = SynthConfig { num_trajectories: n, noise_sigma: 10.0, ..Default::default() };
    let world = synth_world(&cfg, seed).expect("synthetic world");
    let p = prepare(&world.trajectories, &world.network, 100.0, MatchConfig::default(), 0).expect("ingest");
    let all: Vec<&Sample> = p.samples.iter().collect();
    let ctx = context_from(p.grid, &world.network, &all).expect("context");
    let origin = time_origin(&all).expect("time origin");
    Setup { world, samples: p.samples, ctx, origin }
}

pub fn model_config(d: usize, origin: f64) -> ModelConfig {
    ModelConfig { dropout: 0.0, time_origin: origin, ..ModelConfig::with_dim(d) }
}
