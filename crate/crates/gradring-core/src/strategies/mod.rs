//! Synchronization strategies: schedules over the cluster simulator plus
//! numeric gradient reductions over the model.
//!
//! All strategies consume the same (seed, step)-derived batches, so for a
//! fixed global batch their per-step parameters agree with a single-worker
//! run up to floating-point reassociation. Reductions always combine worker
//! gradients in ascending rank order, which makes the master reduction and
//! the ring reduction bit-identical.

use crate::datagen::{self, DatagenConfig};
use crate::memmodel;
use crate::metrics::MetricsRow;
use crate::netsim::{ClusterSpec, Sim, SimError};
use crate::nn::{
    backward, forward, GradientSet, ModelConfig, NnError, OptimizerConfig, OptimizerState,
    ParamSet,
};
use crate::tensor::Dtype;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Single worker computing the whole global batch; the oracle.
    Baseline,
    /// Single parameter server: model broadcast, forward on workers, losses
    /// gathered, backward entirely on rank 0.
    Sps,
    /// Parameter-server variant that gathers gradients instead of losses;
    /// backward runs on every worker.
    SpsGrad,
    /// Every worker holds a replica; rank 0 gathers, averages, and
    /// broadcasts gradients.
    Dps,
    /// Ring allreduce: reduce-scatter then allgather in 2(k-1) rounds.
    Ring,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PrecisionMode {
    Fp32,
    /// Half-precision compute with full-precision master weights.
    Mixed { loss_scale: f64, dynamic_skip: bool },
}

impl PrecisionMode {
    pub fn is_mixed(&self) -> bool {
        matches!(self, PrecisionMode::Mixed { .. })
    }

    fn loss_scale(&self) -> f64 {
        match self {
            PrecisionMode::Fp32 => 1.0,
            PrecisionMode::Mixed { loss_scale, .. } => *loss_scale,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub strategy: StrategyKind,
    pub precision: PrecisionMode,
    pub cluster: ClusterSpec,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub per_worker_batch: usize,
    pub seq_len: usize,
    pub steps: u64,
    pub seed: u64,
    #[serde(default)]
    pub cleanup_enabled: bool,
    #[serde(default = "default_dtype")]
    pub dtype: Dtype,
    /// Keep a flat parameter snapshot after every step (tests only).
    #[serde(default)]
    pub record_params: bool,
}

fn default_dtype() -> Dtype {
    Dtype::F32
}

#[derive(Debug, thiserror::Error)]
pub enum StrategyError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("gradient overflow persisted for more than 50 consecutive steps (step {0})")]
    PersistentOverflow(u64),
}

#[derive(Debug)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    /// Final master (rank 0) parameters.
    pub params: ParamSet,
    /// Flat master parameters after each step, when `record_params` is set.
    pub param_history: Vec<Vec<f64>>,
    pub bytes_by_tag: BTreeMap<String, u64>,
    pub total_time: f64,
    pub worker_sent: Vec<u64>,
    pub utilization: Vec<f64>,
    pub skipped_steps: u64,
    /// Per-worker parameter fingerprints after the last synchronization.
    pub worker_fingerprints: Vec<u64>,
}

impl RunOutput {
    pub fn mean_utilization(&self) -> f64 {
        self.utilization.iter().sum::<f64>() / self.utilization.len() as f64
    }
}

/// Deterministic batch partition: rank r owns the contiguous slice
/// [r*B/k, (r+1)*B/k). Slices are pairwise disjoint and cover the batch.
pub fn scatter_protocol(
    global_batch: usize,
    world_size: usize,
    rank: usize,
) -> Result<Range<usize>, StrategyError> {
    if world_size == 0 || rank >= world_size {
        return Err(StrategyError::Config(format!(
            "rank {rank} outside world size {world_size}"
        )));
    }
    if global_batch % world_size != 0 {
        return Err(StrategyError::Config(format!(
            "global batch {global_batch} not divisible by world size {world_size}"
        )));
    }
    let share = global_batch / world_size;
    Ok(rank * share..(rank + 1) * share)
}

/// Sum worker vectors in ascending rank order, elementwise.
pub fn master_reduce_sum(inputs: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = inputs[0].clone();
    for v in &inputs[1..] {
        for (a, b) in acc.iter_mut().zip(v) {
            *a += *b;
        }
    }
    acc
}

/// Ring allreduce numeric result: blockwise reduce-scatter then allgather.
/// Partials within each block accumulate in ascending rank order, so the
/// result equals `master_reduce_sum` exactly.
pub fn ring_allreduce_sum(inputs: &[Vec<f64>]) -> Vec<f64> {
    let k = inputs.len();
    let n = inputs[0].len();
    let block = n.div_ceil(k);
    let mut out = vec![0.0; n];
    for j in 0..k {
        let range = (j * block).min(n)..((j + 1) * block).min(n);
        let mut acc: Vec<f64> = inputs[0][range.clone()].to_vec();
        for r in 1..k {
            for (a, b) in acc.iter_mut().zip(&inputs[r][range.clone()]) {
                *a += *b;
            }
        }
        out[range].copy_from_slice(&acc);
    }
    out
}

struct Replica {
    params: ParamSet,
    opt: OptimizerState,
}

fn validate(cfg: &RunConfig) -> Result<(), StrategyError> {
    let k = cfg.cluster.world_size();
    if k == 0 {
        return Err(StrategyError::Config("empty cluster".into()));
    }
    if cfg.per_worker_batch == 0 {
        return Err(StrategyError::Config("per-worker batch must be >= 1".into()));
    }
    if cfg.steps == 0 {
        return Err(StrategyError::Config("steps must be >= 1".into()));
    }
    if cfg.seq_len < 2 {
        return Err(StrategyError::Config(
            "sequence length must be >= 2 for next-token targets".into(),
        ));
    }
    if cfg.seq_len > cfg.model.n_ctx + 1 {
        return Err(StrategyError::Config(format!(
            "sequence length {} exceeds context {} + 1",
            cfg.seq_len, cfg.model.n_ctx
        )));
    }
    cfg.model.validate()?;
    match cfg.strategy {
        StrategyKind::Baseline => {
            if k != 1 {
                return Err(StrategyError::Config(
                    "baseline requires world size 1".into(),
                ));
            }
        }
        StrategyKind::Sps | StrategyKind::SpsGrad => {
            if cfg.cluster.nodes != 1 {
                return Err(StrategyError::Config(
                    "single parameter server supports one node only".into(),
                ));
            }
        }
        StrategyKind::Dps => {}
        StrategyKind::Ring => {
            if crate::nn::param_count(&cfg.model) < k as u64 {
                return Err(StrategyError::Config(
                    "ring needs at least one gradient element per worker".into(),
                ));
            }
        }
    }
    if let PrecisionMode::Mixed { loss_scale, .. } = cfg.precision {
        if loss_scale < 1.0 || loss_scale.log2().fract() != 0.0 {
            return Err(StrategyError::Config(format!(
                "loss scale must be a power of two >= 1, got {loss_scale}"
            )));
        }
        if cfg.dtype == Dtype::F16E {
            return Err(StrategyError::Config(
                "mixed precision keeps f32 master weights; dtype must not be f16".into(),
            ));
        }
    }
    Ok(())
}

/// Execute a full training run under the configured strategy.
pub fn run(cfg: &RunConfig) -> Result<RunOutput, StrategyError> {
    validate(cfg)?;
    let k = cfg.cluster.world_size();
    let mixed = cfg.precision.is_mixed();
    let scale = cfg.precision.loss_scale();
    let cdtype = if mixed { Dtype::F16E } else { cfg.dtype };
    let speedup = if mixed {
        cfg.cluster.device.fp16_speedup
    } else {
        1.0
    };
    let spf = cfg.cluster.device.sec_per_sample_fwd / speedup;
    let spb = cfg.cluster.device.sec_per_sample_bwd / speedup;
    let b = cfg.per_worker_batch;
    let global = b * k;

    let master = ParamSet::init(&cfg.model, cfg.dtype, cfg.seed)?;
    let grad_bytes = master.num_params() * cdtype.bytes() as u64;
    let param_bytes = grad_bytes;
    let loss_bytes = cdtype.bytes() as u64;
    let per_replica = matches!(cfg.strategy, StrategyKind::Dps | StrategyKind::Ring);
    let replica_count = if per_replica { k } else { 1 };
    let mut replicas: Vec<Replica> = (0..replica_count)
        .map(|_| Replica {
            params: master.clone(),
            opt: OptimizerState::new(cfg.optimizer.clone(), &master),
        })
        .collect();

    let mut sim = Sim::new(cfg.cluster.clone());
    let dcfg = DatagenConfig::for_model(cfg.model.vocab_size, cfg.seq_len);
    let mut rows = Vec::with_capacity(cfg.steps as usize);
    let mut param_history = Vec::new();
    let mut skipped_steps = 0u64;
    let mut consecutive_skips = 0u64;
    let mut prev_bytes = 0u64;

    for step in 0..cfg.steps {
        let data = datagen::batch(&dcfg, cfg.seed, step, global);
        let mut step_loss;
        let mut overflow = false;
        // Gradient handed to the optimizer(s), already averaged and
        // unscaled; None when the strategy is pure rank-0.
        let reduced: Option<Vec<f64>>;

        match cfg.strategy {
            StrategyKind::Baseline | StrategyKind::Sps => {
                if cfg.strategy == StrategyKind::Sps {
                    for r in 1..k {
                        sim.transfer_blocking(0, r, param_bytes, "model_bcast")?;
                    }
                    for r in 0..k {
                        sim.compute(r, b as f64 * spf);
                    }
                    for r in 1..k {
                        sim.transfer_blocking(r, 0, loss_bytes, "loss_gather")?;
                    }
                } else {
                    sim.compute(0, global as f64 * spf);
                }
                let compute = replicas[0].params.cast(cdtype);
                let (loss, maybe_grads) = match forward(&compute, &data) {
                    Ok((loss, tape)) if loss.is_finite() => {
                        let g = backward(&tape, &compute, scale)?;
                        (loss, Some(g))
                    }
                    Ok((loss, _)) => (loss, None),
                    Err(e) => return Err(e.into()),
                };
                sim.compute(0, global as f64 * spb);
                step_loss = loss;
                match maybe_grads {
                    Some(g) if g.all_finite() => {
                        let mut flat = g.to_flat();
                        for v in &mut flat {
                            *v /= scale;
                        }
                        reduced = Some(flat);
                    }
                    _ => reduced = None,
                }
            }
            StrategyKind::SpsGrad | StrategyKind::Dps | StrategyKind::Ring => {
                if cfg.strategy == StrategyKind::SpsGrad {
                    for r in 1..k {
                        sim.transfer_blocking(0, r, param_bytes, "model_bcast")?;
                    }
                }
                let mut losses = Vec::with_capacity(k);
                let mut flats = Vec::with_capacity(k);
                for r in 0..k {
                    let owner = if per_replica { r } else { 0 };
                    let compute = replicas[owner].params.cast(cdtype);
                    let shard = &data[scatter_protocol(global, k, r)?];
                    sim.compute(r, b as f64 * (spf + spb));
                    match forward(&compute, shard) {
                        Ok((loss, tape)) if loss.is_finite() => {
                            losses.push(loss);
                            let g = backward(&tape, &compute, scale)?;
                            if !g.all_finite() {
                                overflow = true;
                            }
                            flats.push(g.to_flat());
                        }
                        Ok((loss, _)) => {
                            losses.push(loss);
                            overflow = true;
                            flats.push(vec![0.0; master.num_params() as usize]);
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
                step_loss = losses.iter().sum::<f64>() / k as f64;
                let summed = match cfg.strategy {
                    StrategyKind::Ring => {
                        let block_elems = master.num_params().div_ceil(k as u64);
                        let block_bytes = block_elems * cdtype.bytes() as u64;
                        let hops: Vec<(usize, usize, u64)> =
                            (0..k).map(|r| (r, (r + 1) % k, block_bytes)).collect();
                        if k > 1 {
                            for _round in 0..2 * (k - 1) {
                                sim.transfer_round(&hops, "ring")?;
                            }
                        }
                        for r in 0..k {
                            sim.idle(r, cfg.cluster.device.framework_overhead_s);
                        }
                        ring_allreduce_sum(&flats)
                    }
                    _ => {
                        for r in 1..k {
                            sim.transfer_blocking(r, 0, grad_bytes, "grad_gather")?;
                        }
                        if cfg.strategy == StrategyKind::Dps {
                            for r in 1..k {
                                sim.transfer_blocking(0, r, grad_bytes, "grad_bcast")?;
                            }
                        }
                        master_reduce_sum(&flats)
                    }
                };
                let mut flat = summed;
                for v in &mut flat {
                    *v /= k as f64 * scale;
                }
                reduced = if overflow { None } else { Some(flat) };
            }
        }

        if cfg.cleanup_enabled {
            for r in 0..k {
                sim.idle(r, cfg.cluster.device.cleanup_overhead_s);
            }
        }

        let skipped = reduced.is_none();
        if skipped {
            skipped_steps += 1;
            consecutive_skips += 1;
            if consecutive_skips > 50 {
                return Err(StrategyError::PersistentOverflow(step));
            }
            if !step_loss.is_finite() {
                step_loss = f64::NAN;
            }
        } else {
            consecutive_skips = 0;
            let flat = reduced.unwrap();
            for replica in &mut replicas {
                let mut gset = GradientSet::zeros_like(&replica.params);
                gset.from_flat(&flat);
                replica.opt.step(&mut replica.params, &gset);
            }
        }

        let total = sim.total_bytes();
        rows.push(MetricsRow {
            step,
            sim_time_s: sim.time(),
            loss: step_loss,
            bytes_comm: total - prev_bytes,
            utils: (0..k)
                .map(|r| sim.utilization(r).unwrap_or(0.0))
                .collect(),
            skipped,
        });
        prev_bytes = total;
        if cfg.record_params {
            param_history.push(replicas[0].params.to_flat());
        }
    }

    Ok(RunOutput {
        worker_fingerprints: if per_replica {
            replicas.iter().map(|r| r.params.fingerprint()).collect()
        } else {
            vec![replicas[0].params.fingerprint(); k]
        },
        utilization: (0..k)
            .map(|r| sim.utilization(r).unwrap_or(0.0))
            .collect(),
        worker_sent: sim.workers().iter().map(|w| w.bytes_sent).collect(),
        total_time: sim.time(),
        bytes_by_tag: sim.bytes_by_tag().clone(),
        params: replicas.swap_remove(0).params,
        param_history,
        rows,
        skipped_steps,
    })
}

/// Predicted per-worker memory for a run; used by the OOM gate.
pub fn predict_memory(
    layers: &[memmodel::LayerSpec],
    optimizer: crate::memmodel::OptimizerKind,
    cfg: &RunConfig,
    input_elems: u64,
    skew_elems: u64,
    overhead_bytes: u64,
) -> Result<memmodel::PerWorkerEstimate, memmodel::MemError> {
    let k = cfg.cluster.world_size() as u64;
    let global = (cfg.per_worker_batch * cfg.cluster.world_size()) as u64;
    let dtype = if cfg.precision.is_mixed() {
        Dtype::F16E
    } else {
        cfg.dtype
    };
    let est = memmodel::estimate(layers, optimizer, global, input_elems, dtype)?;
    memmodel::per_worker(&est, k, skew_elems, overhead_bytes)
}
