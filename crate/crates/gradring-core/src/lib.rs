//! Deterministic desk-scale simulation of data-parallel training.
//!
//! The crate combines four pieces: an exact-arithmetic tensor library with
//! emulated half precision, a miniature GPT-style transformer with analytic
//! backpropagation, a GPU-memory estimator, and a discrete-event cluster
//! simulator. The `strategies` module ties them together into synchronized
//! training runs (parameter server, master allreduce, ring allreduce, mixed
//! precision) whose numeric results are reproducible bit for bit.

pub mod datagen;
pub mod memmodel;
pub mod metrics;
pub mod netsim;
pub mod nn;
pub mod strategies;
pub mod tensor;

pub use memmodel::{LayerSpec, MemoryEstimate, OptimizerKind, PerWorkerEstimate};
pub use metrics::MetricsRow;
pub use netsim::{ClusterSpec, DeviceModel, Link, Sim, WorkerState};
pub use nn::{GradientSet, ModelConfig, OptimizerConfig, OptimizerState, ParamSet, Tape};
pub use strategies::{PrecisionMode, RunConfig, RunOutput, StrategyKind};
pub use tensor::{Dtype, SeededRng, Tensor};
