//! Shared fixtures for the criterion benchmarks.

use gradring_core::datagen::{self, DatagenConfig};
use gradring_core::netsim::ClusterSpec;
use gradring_core::nn::{ModelConfig, OptimizerConfig, ParamSet};
use gradring_core::strategies::{PrecisionMode, RunConfig, StrategyKind};
use gradring_core::tensor::{Dtype, SeededRng};

pub const SEED: u64 = 2024;

pub fn desk_params() -> ParamSet {
    ParamSet::init(&ModelConfig::desk(), Dtype::F64, SEED).expect("desk init")
}

pub fn desk_batch(samples: usize) -> Vec<Vec<usize>> {
    let config = ModelConfig::desk();
    let dcfg = DatagenConfig::for_model(config.vocab_size, 8);
    datagen::batch(&dcfg, SEED, 0, samples)
}

pub fn desk_run(strategy: StrategyKind, workers: usize, steps: u64) -> RunConfig {
    RunConfig {
        strategy,
        precision: PrecisionMode::Fp32,
        cluster: ClusterSpec::calibrated(1, workers),
        model: ModelConfig::desk(),
        optimizer: OptimizerConfig::sgd(0.1),
        per_worker_batch: 2,
        seq_len: 8,
        steps,
        seed: SEED,
        cleanup_enabled: false,
        dtype: Dtype::F32,
        record_params: false,
    }
}

pub fn gradient_shards(workers: usize, len: usize) -> Vec<Vec<f64>> {
    let mut rng = SeededRng::new(SEED);
    (0..workers)
        .map(|_| (0..len).map(|_| rng.uniform(1.0)).collect())
        .collect()
}
