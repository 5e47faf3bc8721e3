//! Fine-tuning tasks and evaluation.

pub mod finetune;
pub mod metrics;
pub mod similarity;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use finetune::{finetune, start_time_only, FinetuneConfig, Finetuned, Head, Task};
pub use metrics::{binary_metrics, mae, mape, multiclass_metrics, rank_metrics, rmse, RankMetrics};
pub use similarity::{build_sim_benchmark, change_rate, eval_similarity, SimBenchConfig, SimBenchmark};

/// Serialised result of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn new(task: impl Into<String>, metrics: impl IntoIterator<Item = (&'static str, f64)>, config_text: &str, seed: u64) -> Self {
        Self {
            task: task.into(),
            metrics: metrics.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            config_hash: config_hash(config_text),
            seed,
        }
    }
}

/// Hex SHA-256 of a configuration's text form.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}
