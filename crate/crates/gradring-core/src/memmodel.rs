//! GPU-memory estimation: per-layer parameter counts, optimizer factors,
//! total and per-worker byte estimates, and max-batch prediction.
//!
//! Counts follow the published per-layer table literally: Linear is m*n with
//! no bias term, and BatchNorm2d is 2*n where n is the table's batch
//! dimension rather than the channel count. Both quirks are kept as written.

use crate::tensor::Dtype;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        m: u64,
        n: u64,
    },
    Conv2d {
        c_in: u64,
        c_out: u64,
        k: u64,
    },
    BatchNorm2d {
        n: u64,
    },
    Embedding {
        n: u64,
        w: u64,
    },
    /// Escape hatch for exact counts of layers outside the table.
    Custom {
        param_count: u64,
        per_sample_output: u64,
    },
}

impl LayerSpec {
    /// Per-sample element count of this layer's output.
    pub fn per_sample_output(&self) -> u64 {
        match *self {
            LayerSpec::Linear { n, .. } => n,
            LayerSpec::Conv2d { c_out, .. } => c_out,
            LayerSpec::BatchNorm2d { n } => n,
            LayerSpec::Embedding { n, w } => n * w,
            LayerSpec::Custom {
                per_sample_output, ..
            } => per_sample_output,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    Adam,
}

impl OptimizerKind {
    /// Memory multiplier n: layer + gradient (+ momentum terms).
    pub fn factor(self) -> u64 {
        match self {
            OptimizerKind::Sgd => 2,
            OptimizerKind::SgdMomentum => 3,
            OptimizerKind::Adam => 4,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MemError {
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("batch {batch} not divisible by worker count {workers}")]
    IndivisibleBatch { batch: u64, workers: u64 },
    #[error("per-worker batch {0} below 1: workers would idle")]
    IdleWorkers(u64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryEstimate {
    /// Model parameter elements p_m.
    pub p_m: u64,
    /// Optimizer factor n.
    pub n: u64,
    /// Summed per-sample layer-output elements p_o.
    pub p_o: u64,
    /// Model-input elements p_b.
    pub p_b: u64,
    /// Batch size the estimate was taken at.
    pub batch: u64,
    pub dtype_bytes: u64,
    /// Total elements p_m*n + b*p_o + p_b.
    pub elements: u64,
    /// Total bytes.
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerWorkerEstimate {
    pub workers: u64,
    /// Per-worker elements p_m*n + b*(p_o+dp)/k + p_b/k.
    pub elements: u64,
    /// Per-worker bytes including the engineering overhead.
    pub bytes: u64,
    pub skew_elements: u64,
    pub overhead_bytes: u64,
}

/// Weights amount p_l for one layer.
pub fn layer_params(spec: &LayerSpec) -> u64 {
    match *spec {
        LayerSpec::Linear { m, n } => m * n,
        LayerSpec::Conv2d { c_in, c_out, k } => c_in * c_out * k * k,
        LayerSpec::BatchNorm2d { n } => 2 * n,
        LayerSpec::Embedding { n, w } => n * w,
        LayerSpec::Custom { param_count, .. } => param_count,
    }
}

/// p_m: parameter elements over the whole model.
pub fn model_params(layers: &[LayerSpec]) -> u64 {
    layers.iter().map(layer_params).sum()
}

/// p_m * n after applying the optimizer factor.
pub fn optimized_params(p_m: u64, opt: OptimizerKind) -> u64 {
    p_m * opt.factor()
}

/// p_o: summed per-sample output elements over all layers.
pub fn output_params(layers: &[LayerSpec]) -> u64 {
    layers.iter().map(|l| l.per_sample_output()).sum()
}

/// Total memory M = (p_m*n + b*p_o + p_b) * dtype_bytes.
pub fn estimate(
    layers: &[LayerSpec],
    opt: OptimizerKind,
    batch: u64,
    p_b: u64,
    dtype: Dtype,
) -> Result<MemoryEstimate, MemError> {
    if batch == 0 {
        return Err(MemError::ZeroBatch);
    }
    let p_m = model_params(layers);
    let p_o = output_params(layers);
    let n = opt.factor();
    let elements = p_m * n + batch * p_o + p_b;
    let dtype_bytes = dtype.bytes() as u64;
    Ok(MemoryEstimate {
        p_m,
        n,
        p_o,
        p_b,
        batch,
        dtype_bytes,
        elements,
        bytes: elements * dtype_bytes,
    })
}

/// Per-worker memory M_i for k data-parallel workers. `skew_elements` is the
/// per-sample output-size imbalance dp (elements); `overhead_bytes` is the
/// engineering overhead M_e, charged in bytes and not scaled by dtype width.
pub fn per_worker(
    est: &MemoryEstimate,
    workers: u64,
    skew_elements: u64,
    overhead_bytes: u64,
) -> Result<PerWorkerEstimate, MemError> {
    if workers == 0 {
        return Err(MemError::IdleWorkers(0));
    }
    if est.batch % workers != 0 {
        return Err(MemError::IndivisibleBatch {
            batch: est.batch,
            workers,
        });
    }
    if est.batch / workers < 1 {
        return Err(MemError::IdleWorkers(est.batch / workers));
    }
    let elements =
        est.p_m * est.n + est.batch * (est.p_o + skew_elements) / workers + est.p_b / workers;
    Ok(PerWorkerEstimate {
        workers,
        elements,
        bytes: elements * est.dtype_bytes + overhead_bytes,
        skew_elements,
        overhead_bytes,
    })
}

/// Largest global batch (multiple of k) whose per-worker footprint fits in
/// `capacity_bytes`; 0 if even b = k does not fit.
#[allow(clippy::too_many_arguments)]
pub fn max_batch(
    layers: &[LayerSpec],
    opt: OptimizerKind,
    dtype: Dtype,
    capacity_bytes: u64,
    workers: u64,
    p_b: u64,
    skew_elements: u64,
    overhead_bytes: u64,
) -> u64 {
    let mut best = 0;
    let mut b = workers;
    loop {
        let est = match estimate(layers, opt, b, p_b, dtype) {
            Ok(e) => e,
            Err(_) => return best,
        };
        let pw = match per_worker(&est, workers, skew_elements, overhead_bytes) {
            Ok(p) => p,
            Err(_) => return best,
        };
        if pw.bytes <= capacity_bytes {
            best = b;
            b += workers;
        } else {
            return best;
        }
        // Footprint is affine increasing in b, so the first failure is final.
        if b > 1 << 40 {
            return best;
        }
    }
}

/// LayerSpec description of the transformer, exact in p_m: the total of
/// these entries equals the model's true parameter count. Per-sample
/// outputs count the activations each block materializes for a sequence of
/// `seq_len` tokens: embedding d*t; per block 18*d*t (two layer-norms,
/// q/k/v, concat, attention output, residuals, 4x feed-forward pre- and
/// post-activation) plus n_head*t^2 attention probabilities; final
/// layer-norm and logits.
pub fn layer_specs_for_model(cfg: &crate::nn::ModelConfig, seq_len: u64) -> Vec<LayerSpec> {
    let d = cfg.n_embd as u64;
    let t = seq_len;
    let vocab = cfg.vocab_size as u64;
    let mut out = vec![LayerSpec::Custom {
        param_count: vocab * d + cfg.n_ctx as u64 * d,
        per_sample_output: d * t,
    }];
    for _ in 0..cfg.n_layer {
        out.push(LayerSpec::Custom {
            param_count: 12 * d * d + 9 * d,
            per_sample_output: 18 * d * t + cfg.n_head as u64 * t * t,
        });
    }
    out.push(LayerSpec::Custom {
        param_count: 2 * d + if cfg.tied_output { 0 } else { vocab * d },
        per_sample_output: d * t + vocab * t,
    });
    out
}
