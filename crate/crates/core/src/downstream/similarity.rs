//! Most-similar trajectory search: benchmark construction by downsampling
//! and re-matching, and ranking by cosine similarity.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{rank_metrics, rank_of, RankMetrics};
use crate::data::ingest::to_sample;
use crate::data::matching::lcs_len;
use crate::data::{GpsTrajectory, GridSpec, MapMatcher, Sample};
use crate::error::{Error, Result};
use crate::math::cosine;
use crate::model::{Model, ModelContext};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimBenchConfig {
    pub queries: usize,
    pub negatives: usize,
    /// Probability of dropping each interior point.
    pub drop_prob: f64,
    pub min_change: f64,
    pub max_change: f64,
}

impl Default for SimBenchConfig {
    fn default() -> Self {
        Self { queries: 200, negatives: 5000, drop_prob: 0.5, min_change: 0.3, max_change: 0.5 }
    }
}

/// Query `i` pairs with `positives[i]`; the database is positives followed
/// by negatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimBenchmark {
    pub seed: u64,
    pub config: SimBenchConfig,
    pub queries: Vec<Sample>,
    pub positives: Vec<Sample>,
    pub negatives: Vec<Sample>,
    /// Candidates tried and accepted while building.
    pub tried: usize,
    pub accepted: usize,
}

impl SimBenchmark {
    pub fn database(&self) -> Vec<&Sample> {
        self.positives.iter().chain(&self.negatives).collect()
    }
}

/// `1 − |LCS(a, b)| / max(|a|, |b|)`; 0 for two empty sequences.
pub fn change_rate(a: &[usize], b: &[usize]) -> f64 {
    let m = a.len().max(b.len());
    if m == 0 {
        return 0.0;
    }
    1.0 - lcs_len(a, b) as f64 / m as f64
}

/// Keeps the first and last points and drops each interior point with
/// probability `p`.
pub fn downsample(gps: &GpsTrajectory, p: f64, rng: &mut impl Rng) -> GpsTrajectory {
    let n = gps.points.len();
    let points = gps
        .points
        .iter()
        .enumerate()
        .filter(|&(i, _)| i == 0 || i + 1 == n || rng.random::<f64>() >= p)
        .map(|(_, q)| *q)
        .collect();
    GpsTrajectory { points, ..gps.clone() }
}

fn segments(s: &Sample) -> Vec<usize> {
    s.road.iter().map(|t| t.segment_id).collect()
}

/// Builds a benchmark from candidate raw trajectories and a pool of
/// already-ingested negatives. Candidate `i` downsamples with its own RNG
/// stream so the result does not depend on how many were tried before it.
pub fn build_sim_benchmark(
    candidates: &[GpsTrajectory],
    negative_pool: &[Sample],
    matcher: &MapMatcher,
    spec: &GridSpec,
    utc_offset: i64,
    cfg: &SimBenchConfig,
    seed: u64,
) -> Result<SimBenchmark> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (mut queries, mut positives) = (Vec::new(), Vec::new());
    let mut tried = 0;
    for &i in &order {
        if queries.len() == cfg.queries {
            break;
        }
        tried += 1;
        let gps = &candidates[i];
        let Ok(orig) = to_sample(gps, matcher, spec, utc_offset) else { continue };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let mut variant = downsample(gps, cfg.drop_prob, &mut rng);
        variant.id = format!("{}~pos", gps.id);
        let Ok(pos) = to_sample(&variant, matcher, spec, utc_offset) else { continue };
        let rate = change_rate(&segments(&orig), &segments(&pos));
        if (cfg.min_change..=cfg.max_change).contains(&rate) {
            queries.push(orig);
            positives.push(pos);
        }
    }
    let accepted = queries.len();
    if accepted < cfg.queries {
        return Err(Error::Benchmark(format!(
            "only {accepted} of {} required queries accepted from {tried} candidates (acceptance rate {:.4})",
            cfg.queries,
            accepted as f64 / tried.max(1) as f64
        )));
    }
    let taken: HashSet<&str> = queries.iter().map(|s| s.id.as_str()).collect();
    let mut pool: Vec<&Sample> = negative_pool.iter().filter(|s| !taken.contains(s.id.as_str())).collect();
    if pool.len() < cfg.negatives {
        return Err(Error::Benchmark(format!("{} negatives requested, pool holds {}", cfg.negatives, pool.len())));
    }
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_A5A5));
    let negatives = pool.into_iter().take(cfg.negatives).cloned().collect();
    Ok(SimBenchmark { seed, config: cfg.clone(), queries, positives, negatives, tried, accepted })
}

/// Rank of `database[target[i]]` among all database rows for query `i`,
/// by descending cosine similarity.
pub fn ranks(queries: &[Vec<f64>], database: &[Vec<f64>], target: &[usize]) -> Result<Vec<usize>> {
    if target.len() != queries.len() || target.iter().any(|&t| t >= database.len()) {
        return Err(Error::Benchmark("a query's positive is missing from the database".into()));
    }
    queries
        .iter()
        .zip(target)
        .map(|(q, &t)| {
            let scores = database.iter().map(|v| cosine(q, v)).collect::<Result<Vec<f64>>>()?;
            Ok(rank_of(&scores, t))
        })
        .collect()
}

pub fn eval_similarity(model: &Model, ctx: &ModelContext, bench: &SimBenchmark) -> Result<RankMetrics> {
    if bench.positives.len() != bench.queries.len() {
        return Err(Error::Benchmark(format!(
            "{} queries but {} positives",
            bench.queries.len(),
            bench.positives.len()
        )));
    }
    let q: Vec<&Sample> = bench.queries.iter().collect();
    let qv = model.encode(ctx, &q, 64)?;
    let dv = model.encode(ctx, &bench.database(), 64)?;
    let target: Vec<usize> = (0..q.len()).collect();
    rank_metrics(&ranks(&qv, &dv, &target)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_world, MatchConfig, SynthConfig};
    use crate::pipeline::prepare;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn change_rate_extremes() {
        assert_eq!(change_rate(&[1, 2, 3], &[1, 2, 3]), 0.0);
        assert_eq!(change_rate(&[1, 2, 3], &[4, 5]), 1.0);
        assert!((change_rate(&[1, 2, 3, 4], &[1, 3, 4]) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn downsampling_keeps_endpoints() {
        let w = synth_world(&SynthConfig { rows: 5, cols: 5, num_trajectories: 5, ..Default::default() }, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in &w.trajectories {
            let v = downsample(t, 0.5, &mut rng);
            assert_eq!(v.points.first(), t.points.first());
            assert_eq!(v.points.last(), t.points.last());
            assert!(v.points.len() <= t.points.len());
        }
    }

    #[test]
    fn exact_match_ranks_first() {
        let q = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let db = vec![vec![0.0, 2.0], vec![0.6, 0.8], vec![3.0, 0.0]];
        assert_eq!(ranks(&q, &db, &[2, 0]).unwrap(), vec![1, 1]);
        assert!(ranks(&q, &db, &[2, 3]).is_err());
    }

    #[test]
    fn random_vectors_rank_near_middle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut unit = || {
            let v: Vec<f64> = (0..16).map(|_| rng.random::<f64>() - 0.5).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let mut total = 0.0;
        for _ in 0..1000 {
            let q = vec![unit()];
            let db: Vec<Vec<f64>> = (0..101).map(|_| unit()).collect();
            total += ranks(&q, &db, &[0]).unwrap()[0] as f64;
        }
        let mr = total / 1000.0;
        assert!((mr - 51.0).abs() <= 5.0, "{mr}");
    }

    #[test]
    fn benchmark_is_reproducible_and_valid() {
        let cfg = SynthConfig { num_trajectories: 300, interval: 20.0, noise_sigma: 20.0, ..Default::default() };
        let w = synth_world(&cfg, 5).unwrap();
        let p = prepare(&w.trajectories, &w.network, 100.0, MatchConfig::default(), 0).unwrap();
        let matcher = MapMatcher::new(&w.network, MatchConfig::default());
        let bc = SimBenchConfig { queries: 5, negatives: 50, ..Default::default() };
        let a = build_sim_benchmark(&w.trajectories, &p.samples, &matcher, &p.grid, 0, &bc, 9).unwrap();
        let b = build_sim_benchmark(&w.trajectories, &p.samples, &matcher, &p.grid, 0, &bc, 9).unwrap();
        assert_eq!(a, b);
        for (q, s) in a.queries.iter().zip(&a.positives) {
            let r = change_rate(&segments(q), &segments(s));
            assert!((0.3..=0.5).contains(&r));
            assert_eq!(q.grid[0].anchor, s.grid[0].anchor);
        }
        let too_many = SimBenchConfig { queries: 100_000, ..bc };
        match build_sim_benchmark(&w.trajectories, &p.samples, &matcher, &p.grid, 0, &too_many, 9) {
            Err(Error::Benchmark(m)) => assert!(m.contains("acceptance rate")),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn change_rate_is_bounded(a in prop::collection::vec(0usize..6, 0..12), b in prop::collection::vec(0usize..6, 0..12)) {
            let r = change_rate(&a, &b);
            prop_assert!((0.0..=1.0).contains(&r));
        }

        #[test]
        fn ranks_ignore_database_order(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
            let db: Vec<Vec<f64>> = (0..20).map(|_| (0..5).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
            let target = vec![0, 3, 7, 19];
            let base = ranks(&q, &db, &target).unwrap();
            let mut perm: Vec<usize> = (0..20).collect();
            perm.shuffle(&mut rng);
            let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| db[i].clone()).collect();
            let moved: Vec<usize> = target.iter().map(|t| perm.iter().position(|p| p == t).unwrap()).collect();
            prop_assert_eq!(base, ranks(&q, &shuffled, &moved).unwrap());
        }
    }
}
