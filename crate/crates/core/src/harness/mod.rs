//! Experiment harness: configuration, data, optimisers, training,
//! checkpoints and cost accounting.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod experiment;
pub mod flops;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{KeyValues, Method, OptimizerKind, TrainConfig};
pub use data::Dataset;
pub use experiment::{run, RunResult};
pub use flops::{flop_report, FlopReport};
pub use train::{metrics_csv, train, MetricsRow, TrainOutcome};

/// Independent seed streams derived from the single config seed.
pub mod seeds {
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const ALLOC: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const PRUNE: u64 = 6;
    pub const PROBE: u64 = 7;

    pub fn derive(seed: u64, stream: u64) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng.next_u64()
    }
}
