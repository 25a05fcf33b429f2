//! Frozen-base training, evaluation, and the noise-injection protocol.

mod eval;
mod noise;
mod report;
mod train;

pub use eval::{evaluate, evaluate_split};
pub use noise::{
    inject_noise, mean_std, noise_sweep, noise_sweep_checkpoints, NoiseScope, NoiseSweepReport,
    NoiseSweepSpec, SweepAggregate, SweepCell,
};
pub use report::{metrics_csv, sweep_csv, sweep_json, write_text};
pub use train::{train, EpochMetrics, Optimizer, TrainConfig, TrainReport};
