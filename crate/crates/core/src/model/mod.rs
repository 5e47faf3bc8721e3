//! Encoders, interactor, losses and the pretraining loop.

pub mod batch;
pub mod context;
pub mod grid_encoder;
pub mod interactor;
pub mod layers;
pub mod losses;
pub mod network;
pub mod road_encoder;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{make_batch, plan_batches, Batch, GridBatch, MaskSettings, RoadBatch};
pub use context::ModelContext;
pub use network::{Model, Outputs, StepLosses};
pub use train::{pretrain, train_step, write_loss_csv, LossRecord, PretrainConfig, TrainState};

/// Which encoders a model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Both encoders, the interactor, contrastive and masked-road losses.
    Full,
    /// Road encoder alone with masked-road reconstruction on its own output.
    RoadOnly,
    /// Grid encoder alone with masked-cell reconstruction on its own output.
    GridOnly,
}

/// Denominator of the masked-road loss within one trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MlmNorm {
    /// Average over masked positions.
    Masked,
    /// Sum over masked positions divided by the sequence length.
    Sequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Representation size.
    pub d: usize,
    /// Hidden size inside both encoders; must equal `2·d`.
    pub h: usize,
    pub conv_channels: usize,
    pub gat_layers: usize,
    pub gat_heads: usize,
    pub road_layers: usize,
    pub road_heads: usize,
    pub grid_layers: usize,
    pub grid_heads: usize,
    pub inter_layers: usize,
    pub inter_heads: usize,
    pub dropout: f64,
    pub delta_init: f64,
    pub variant: Variant,
    pub mlm_norm: MlmNorm,
    /// Timestamps are measured in days from this instant (seconds since the
    /// epoch) before entering the time encoding.
    pub time_origin: f64,
    pub type_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            h: 256,
            conv_channels: 64,
            gat_layers: 3,
            gat_heads: 4,
            road_layers: 4,
            road_heads: 4,
            grid_layers: 2,
            grid_heads: 4,
            inter_layers: 2,
            inter_heads: 2,
            dropout: 0.1,
            delta_init: 0.07,
            variant: Variant::Full,
            mlm_norm: MlmNorm::Masked,
            time_origin: 0.0,
            type_bias: true,
        }
    }
}

impl ModelConfig {
    /// Default hyperparameters at representation size `d`.
    pub fn with_dim(d: usize) -> Self {
        Self { d, h: 2 * d, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.h != 2 * self.d {
            return bad(format!("h = {} must equal 2d = {}", self.h, 2 * self.d));
        }
        let counts = [
            ("d", self.d),
            ("conv_channels", self.conv_channels),
            ("gat_layers", self.gat_layers),
            ("gat_heads", self.gat_heads),
            ("road_layers", self.road_layers),
            ("road_heads", self.road_heads),
            ("grid_layers", self.grid_layers),
            ("grid_heads", self.grid_heads),
            ("inter_layers", self.inter_layers),
            ("inter_heads", self.inter_heads),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        for (name, heads, dim) in [
            ("gat_heads", self.gat_heads, self.h),
            ("road_heads", self.road_heads, self.h),
            ("grid_heads", self.grid_heads, self.h),
            ("inter_heads", self.inter_heads, self.d),
        ] {
            if dim % heads != 0 {
                return bad(format!("{name} = {heads} does not divide {dim}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.01..=1.0).contains(&self.delta_init) {
            return bad(format!("temperature {} outside [0.01, 1]", self.delta_init));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hidden_size_rule() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { h: 100, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { road_heads: 3, ..ModelConfig::with_dim(8) }.validate().is_err());
        assert!(ModelConfig::with_dim(8).validate().is_ok());
    }
}

#[cfg(test)]
pub(crate) mod fixture {
    use super::*;
    use crate::data::{synth_world, MatchConfig, Sample, SynthConfig};
    use crate::pipeline::{context_from, prepare, time_origin};

    pub struct Fixture {
        pub ctx: ModelContext,
        pub samples: Vec<Sample>,
        pub origin: f64,
    }

    pub fn world(n: usize, seed: u64) -> Fixture {
        let cfg = SynthConfig { rows: 5, cols: 5, num_trajectories: n, ..Default::default() };
        let w = synth_world(&cfg, seed).unwrap();
        let p = prepare(&w.trajectories, &w.network, 200.0, MatchConfig::default(), 0).unwrap();
        let all: Vec<&Sample> = p.samples.iter().collect();
        let ctx = context_from(p.grid, &w.network, &all).unwrap();
        let origin = time_origin(&all).unwrap();
        Fixture { ctx, samples: p.samples, origin }
    }

    pub fn tiny(variant: Variant, origin: f64) -> ModelConfig {
        ModelConfig {
            d: 8,
            h: 16,
            conv_channels: 4,
            gat_layers: 2,
            gat_heads: 2,
            road_layers: 2,
            road_heads: 2,
            grid_layers: 1,
            grid_heads: 2,
            inter_layers: 1,
            inter_heads: 2,
            dropout: 0.0,
            variant,
            time_origin: origin,
            ..Default::default()
        }
    }
}
