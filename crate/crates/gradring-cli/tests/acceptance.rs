//! End-to-end acceptance gate: ten numbered checks, one PASS/FAIL line
//! each. Checks 1–8 exercise the library directly; 9–10 drive the
//! `gradring` binary. Determinism statements hold per platform build.

use std::path::PathBuf;
use std::process::Command;

use gradring_core::memmodel::{self, LayerSpec, OptimizerKind};
use gradring_core::netsim::ClusterSpec;
use gradring_core::nn::{
    self, attention_matrix, attention_reference, backward, forward, multi_head, ModelConfig,
    OptimizerConfig, ParamSet,
};
use gradring_core::strategies::{
    ring_allreduce_sum, run, PrecisionMode, RunConfig, StrategyKind,
};
use gradring_core::tensor::{Dtype, SeededRng, Tensor};

fn report(n: u32, name: &str, failures: &[String]) {
    let ok = failures.is_empty();
    println!(
        "criterion {n:02} [{}] {name}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(
        ok,
        "criterion {n:02} ({name}) failed:\n{}",
        failures.join("\n")
    );
}

fn desk_run(strategy: StrategyKind, nodes: usize, gpus: usize, batch: usize) -> RunConfig {
    RunConfig {
        strategy,
        precision: PrecisionMode::Fp32,
        cluster: ClusterSpec::calibrated(nodes, gpus),
        model: ModelConfig::desk(),
        optimizer: OptimizerConfig::sgd(0.1),
        per_worker_batch: batch,
        seq_len: 8,
        steps: 20,
        seed: 1234,
        cleanup_enabled: false,
        dtype: Dtype::F32,
        record_params: false,
    }
}

fn mixed(scale: f64) -> PrecisionMode {
    PrecisionMode::Mixed {
        loss_scale: scale,
        dynamic_skip: true,
    }
}

/// max |a-b| / max(|a|_inf, floor): scale-relative parameter distance.
fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
    let num = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let den = a.iter().map(|x| x.abs()).fold(0.0, f64::max);
    num / den.max(1e-300)
}

#[test]
fn criterion_01_strategy_equivalence() {
    let mut failures = Vec::new();
    for (dtype, tol) in [(Dtype::F32, 1e-5), (Dtype::F64, 1e-12)] {
        let mut baseline = desk_run(StrategyKind::Baseline, 1, 1, 8);
        baseline.dtype = dtype;
        baseline.record_params = true;
        let oracle = run(&baseline).expect("baseline run");
        for strategy in [
            StrategyKind::Sps,
            StrategyKind::SpsGrad,
            StrategyKind::Dps,
            StrategyKind::Ring,
        ] {
            let mut cfg = desk_run(strategy, 1, 4, 2);
            cfg.dtype = dtype;
            cfg.record_params = true;
            let out = run(&cfg).expect("strategy run");
            for (step, (a, b)) in oracle
                .param_history
                .iter()
                .zip(&out.param_history)
                .enumerate()
            {
                let rel = rel_inf(a, b);
                if rel >= tol {
                    failures.push(format!(
                        "{strategy:?} {dtype:?} step {step}: rel {rel:.3e} >= {tol:.0e}"
                    ));
                }
            }
        }
    }
    report(1, "strategy equivalence vs single-worker oracle", &failures);
}

#[test]
fn criterion_02_finite_difference_gradients() {
    let mut failures = Vec::new();
    let config = ModelConfig::desk();
    let params = ParamSet::init(&config, Dtype::F64, 99).expect("init");
    let dcfg = gradring_core::datagen::DatagenConfig::for_model(config.vocab_size, 8);
    let batch = gradring_core::datagen::batch(&dcfg, 5, 0, 2);

    let (_, tape) = forward(&params, &batch).expect("forward");
    let analytic = backward(&tape, &params, 1.0).expect("backward").to_flat();

    let base = params.to_flat();
    let h = 1e-4;
    let mut work = params.clone();
    let mut fd = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        work.from_flat(&plus);
        let (lp, _) = forward(&work, &batch).expect("forward+");
        let mut minus = base.clone();
        minus[i] -= h;
        work.from_flat(&minus);
        let (lm, _) = forward(&work, &batch).expect("forward-");
        fd[i] = (lp - lm) / (2.0 * h);
    }

    let mut offset = 0;
    for (name, shape) in nn::tensor_shapes(&config) {
        let len: usize = shape.iter().product();
        let a = &analytic[offset..offset + len];
        let f = &fd[offset..offset + len];
        let num = a
            .iter()
            .zip(f)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let den = a
            .iter()
            .chain(f)
            .map(|x| x.abs())
            .fold(0.0, f64::max)
            .max(1e-8);
        let rel = num / den;
        if rel >= 1e-4 {
            failures.push(format!("tensor {name}: rel {rel:.3e} >= 1e-4"));
        }
        offset += len;
    }
    assert_eq!(offset, base.len());
    report(2, "analytic gradients match central differences", &failures);
}

#[test]
fn criterion_03_attention_form_equivalence() {
    let mut failures = Vec::new();
    let mut rng = SeededRng::new(321);

    for case in 0..50 {
        let t = 2 + rng.below(15) as usize;
        let d = 2 + rng.below(8) as usize;
        let dh = 1 + rng.below(d as u64) as usize;
        let causal = case % 2 == 0;
        let a = Tensor::uniform(&[d, t], Dtype::F64, 1.0, &mut rng);
        let w_q = Tensor::uniform(&[dh, d], Dtype::F64, 1.0, &mut rng);
        let w_k = Tensor::uniform(&[dh, d], Dtype::F64, 1.0, &mut rng);
        let w_v = Tensor::uniform(&[dh, d], Dtype::F64, 1.0, &mut rng);
        let m = attention_matrix(&a, &w_q, &w_k, &w_v, causal).expect("matrix");
        let r = attention_reference(&a, &w_q, &w_k, &w_v, causal).expect("reference");
        let mut worst = 0.0f64;
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                worst = worst.max((m.get(i, j) - r.get(i, j)).abs());
            }
        }
        if worst > 1e-12 {
            failures.push(format!(
                "case {case} (t={t}, d={d}, dh={dh}, causal={causal}): diff {worst:.3e}"
            ));
        }
    }

    // Multi-head: stack per-head references and apply the output matrix.
    let config = ModelConfig::desk();
    let dh = config.head_dim();
    for seed in 0..10u64 {
        let params = ParamSet::init(&config, Dtype::F64, seed).expect("init");
        let layer = &params.layers[0];
        let mut rng2 = SeededRng::new(seed + 77);
        let t = 2 + rng2.below(15) as usize;
        let a = Tensor::uniform(&[config.n_embd, t], Dtype::F64, 1.0, &mut rng2);
        let got = multi_head(&a, layer, config.n_head).expect("multi_head");

        let slice = |w: &Tensor, h: usize| -> Tensor {
            let mut out = Tensor::zeros(&[dh, w.cols()], Dtype::F64);
            for r in 0..dh {
                for c in 0..w.cols() {
                    out.set(r, c, w.get(h * dh + r, c));
                }
            }
            out
        };
        let mut stacked = Tensor::zeros(&[config.n_embd, t], Dtype::F64);
        for h in 0..config.n_head {
            let head = attention_reference(
                &a,
                &slice(&layer.w_q, h),
                &slice(&layer.w_k, h),
                &slice(&layer.w_v, h),
                true,
            )
            .expect("head reference");
            for r in 0..dh {
                for c in 0..t {
                    stacked.set(h * dh + r, c, head.get(r, c));
                }
            }
        }
        let want = layer.w_attn_out.matmul(&stacked).expect("projection");
        let mut worst = 0.0f64;
        for i in 0..got.rows() {
            for j in 0..got.cols() {
                worst = worst.max((got.get(i, j) - want.get(i, j)).abs());
            }
        }
        if worst > 1e-12 {
            failures.push(format!("multi-head seed {seed}: diff {worst:.3e}"));
        }
    }
    report(3, "attention matrix form equals per-vector reference", &failures);
}

#[test]
fn criterion_04_communication_accounting() {
    let mut failures = Vec::new();
    for k in [2usize, 3, 4, 8] {
        let p_elems = nn::param_count(&ModelConfig::desk());
        let width = Dtype::F32.bytes() as u64;
        let p_bytes = p_elems * width;
        let steps = 3u64;
        let with_steps = |strategy| {
            let mut cfg = desk_run(strategy, 1, k, 2);
            cfg.steps = steps;
            cfg
        };

        let sps = run(&with_steps(StrategyKind::Sps)).expect("sps");
        let want = steps * (k as u64 - 1) * p_bytes;
        let got = sps.bytes_by_tag.get("model_bcast").copied().unwrap_or(0);
        if got != want {
            failures.push(format!("sps k={k}: model bytes {got} != {want}"));
        }

        let dps = run(&with_steps(StrategyKind::Dps)).expect("dps");
        let want = steps * 2 * (k as u64 - 1) * p_bytes;
        let got = dps.bytes_by_tag.get("grad_gather").copied().unwrap_or(0)
            + dps.bytes_by_tag.get("grad_bcast").copied().unwrap_or(0);
        if got != want {
            failures.push(format!("dps k={k}: gradient bytes {got} != {want}"));
        }

        let ring = run(&with_steps(StrategyKind::Ring)).expect("ring");
        let block_bytes = p_elems.div_ceil(k as u64) * width;
        let ideal = 2.0 * (k as f64 - 1.0) / k as f64 * p_bytes as f64;
        for (rank, &sent) in ring.worker_sent.iter().enumerate() {
            let per_step = sent as f64 / steps as f64;
            if (per_step - ideal).abs() > block_bytes as f64 {
                failures.push(format!(
                    "ring k={k} rank {rank}: {per_step} bytes/step vs ideal {ideal} (block {block_bytes})"
                ));
            }
        }
    }

    report(4, "communication byte counters match closed forms", &failures);
}

#[test]
fn criterion_05_ring_reduction_oracle() {
    let mut failures = Vec::new();
    let mut rng = SeededRng::new(654);
    for k in 2usize..=5 {
        for trial in 0..100 {
            let len = 1 + rng.below(64) as usize;
            let inputs: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..len).map(|_| rng.uniform(1.0)).collect())
                .collect();
            let mut want = inputs[0].clone();
            for v in &inputs[1..] {
                for (acc, x) in want.iter_mut().zip(v) {
                    *acc += x;
                }
            }
            let got = ring_allreduce_sum(&inputs);
            if got != want {
                failures.push(format!("k={k} trial {trial}: ring != sequential"));
            }
        }
    }
    report(5, "ring allreduce equals ascending sequential sum", &failures);
}

#[test]
fn criterion_06_memory_formulas() {
    let mut failures = Vec::new();
    let mut check = |label: &str, got: u64, want: u64| {
        if got != want {
            failures.push(format!("{label}: {got} != {want}"));
        }
    };

    check(
        "linear",
        memmodel::layer_params(&LayerSpec::Linear { m: 3, n: 5 }),
        15,
    );
    check(
        "conv2d",
        memmodel::layer_params(&LayerSpec::Conv2d {
            c_in: 2,
            c_out: 3,
            k: 3,
        }),
        54,
    );
    check(
        "batchnorm2d",
        memmodel::layer_params(&LayerSpec::BatchNorm2d { n: 6 }),
        12,
    );
    check(
        "embedding",
        memmodel::layer_params(&LayerSpec::Embedding { n: 10, w: 4 }),
        40,
    );

    let layers = [LayerSpec::Linear { m: 4, n: 3 }, LayerSpec::Linear { m: 3, n: 2 }];
    let est = memmodel::estimate(&layers, OptimizerKind::Adam, 2, 4, Dtype::F32).expect("estimate");
    check("total elements", est.elements, 18 * 4 + 2 * 5 + 4);
    check("total bytes", est.bytes, (18 * 4 + 2 * 5 + 4) * 4);
    let pw = memmodel::per_worker(&est, 2, 1, 7).expect("per worker");
    check("per-worker elements", pw.elements, 72 + 2 * (5 + 1) / 2 + 2);
    check("per-worker bytes", pw.bytes, (72 + 6 + 2) * 4 + 7);

    let half = memmodel::estimate(&layers, OptimizerKind::Adam, 2, 4, Dtype::F16E).expect("half");
    check("fp16 bytes are exactly half of fp32", half.bytes * 2, est.bytes);
    drop(check);

    let count = nn::param_count(&ModelConfig::gpt2_small()) as f64;
    let target = 106_310_400.0;
    if (count - target).abs() / target >= 0.01 {
        failures.push(format!("100M-scale param count {count} not within 1% of {target}"));
    }

    report(6, "memory estimation formulas exact", &failures);
}

#[test]
fn criterion_07_qualitative_orderings() {
    let mut failures = Vec::new();

    let time = |cfg: &RunConfig| run(cfg).expect("run").total_time;
    let sps = desk_run(StrategyKind::Sps, 1, 4, 2);
    let baseline = desk_run(StrategyKind::Baseline, 1, 1, 8);
    let ring = desk_run(StrategyKind::Ring, 1, 4, 2);
    let dps = desk_run(StrategyKind::Dps, 1, 4, 2);
    let mut ring_mixed = ring.clone();
    ring_mixed.precision = mixed(1024.0);
    let mut dps_mixed = dps.clone();
    dps_mixed.precision = mixed(1024.0);

    let chain = [
        ("sps", time(&sps)),
        ("baseline", time(&baseline)),
        ("ring", time(&ring)),
        ("dps", time(&dps)),
        ("ring-mixed", time(&ring_mixed)),
        ("dps-mixed", time(&dps_mixed)),
    ];
    for pair in chain.windows(2) {
        if pair[0].1 <= pair[1].1 {
            failures.push(format!(
                "{} ({:.3e} s) not slower than {} ({:.3e} s)",
                pair[0].0, pair[0].1, pair[1].0, pair[1].1
            ));
        }
    }

    let mut dps_cleanup = dps.clone();
    dps_cleanup.cleanup_enabled = true;
    let ratio = time(&dps_cleanup) / chain[3].1;
    if !(2.4..=3.6).contains(&ratio) {
        failures.push(format!("dps cleanup ratio {ratio:.3} outside 3x +/- 20%"));
    }

    let mut two_node = desk_run(StrategyKind::Ring, 2, 4, 2);
    two_node.precision = mixed(1024.0);
    let mut one_node = desk_run(StrategyKind::Ring, 1, 4, 4);
    one_node.precision = mixed(1024.0);
    if time(&two_node) <= time(&one_node) {
        failures.push("2x4 b=2 ring-mixed not slower than 1x4 b=4".into());
    }

    let sps_util = run(&sps).expect("sps").mean_utilization();
    let dps_util = run(&dps).expect("dps").mean_utilization();
    if sps_util >= dps_util {
        failures.push(format!(
            "mean sps utilization {sps_util:.3} not below dps {dps_util:.3}"
        ));
    }

    report(7, "calibrated cost-model orderings", &failures);
}

#[test]
fn criterion_08_mixed_precision_behavior() {
    let mut failures = Vec::new();

    // A huge loss scale overflows every f16 gradient: all steps skip and
    // the master weights never move.
    let mut overflow = desk_run(StrategyKind::Dps, 1, 4, 2);
    overflow.steps = 3;
    overflow.precision = mixed((2.0f64).powi(50));
    let out = run(&overflow).expect("overflow run");
    if out.skipped_steps != 3 || out.rows.iter().any(|r| !r.skipped) {
        failures.push(format!("expected 3 skipped steps, got {}", out.skipped_steps));
    }
    let initial = ParamSet::init(&overflow.model, overflow.dtype, overflow.seed)
        .expect("init")
        .fingerprint();
    if out.params.fingerprint() != initial {
        failures.push("parameters changed on skipped steps".into());
    }

    let fp32 = desk_run(StrategyKind::Dps, 1, 4, 2);
    let mut half = fp32.clone();
    half.precision = mixed(1024.0);
    let fp32_out = run(&fp32).expect("fp32");
    let half_out = run(&half).expect("mixed");
    let fp32_bytes: u64 = fp32_out.bytes_by_tag.values().sum();
    let half_bytes: u64 = half_out.bytes_by_tag.values().sum();
    if half_bytes * 2 != fp32_bytes {
        failures.push(format!(
            "mixed bytes {half_bytes} not exactly half of fp32 {fp32_bytes}"
        ));
    }

    let mut fp32_long = desk_run(StrategyKind::Dps, 1, 4, 2);
    fp32_long.steps = 50;
    let mut half_long = fp32_long.clone();
    half_long.precision = mixed(1024.0);
    let a = run(&fp32_long).expect("fp32 long").rows.last().unwrap().loss;
    let b = run(&half_long).expect("mixed long").rows.last().unwrap().loss;
    if (a - b).abs() >= 5e-2 {
        failures.push(format!(
            "step-50 loss gap {:.3e} >= 5e-2 (fp32 {a}, mixed {b})",
            (a - b).abs()
        ));
    }

    report(8, "mixed precision: skips, halved bytes, close loss", &failures);
}

fn workspace_config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

#[test]
fn criterion_09_csv_determinism() {
    let mut failures = Vec::new();
    let dir = tempfile::tempdir().expect("tempdir");
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        r#"{
          "run": {
            "strategy": "dps",
            "cluster": {
              "nodes": 1, "gpus_per_node": 4,
              "intra_link": { "latency_s": 5e-6, "bandwidth_bytes_per_s": 5e10 },
              "inter_link": { "latency_s": 5e-5, "bandwidth_bytes_per_s": 1e10 },
              "device": {
                "sec_per_sample_fwd": 2e-6, "sec_per_sample_bwd": 6e-6,
                "fp16_speedup": 2.0, "cleanup_overhead_s": 1e-4,
                "framework_overhead_s": 1e-5
              }
            },
            "per_worker_batch": 2, "seq_len": 8, "steps": 20, "seed": 7
          }
        }"#,
    )
    .expect("write config");

    let mut outputs = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("metrics{i}.csv"));
        let status = Command::new(env!("CARGO_BIN_EXE_gradring"))
            .args(["train", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .status()
            .expect("spawn");
        if !status.success() {
            failures.push(format!("run {i} exited with {status}"));
        }
        outputs.push(std::fs::read(&out).unwrap_or_default());
    }
    if outputs[0] != outputs[1] || outputs[0].is_empty() {
        failures.push("CSV outputs differ between identical runs".into());
    }
    report(9, "identical config and seed give byte-identical CSVs", &failures);
}

#[test]
fn criterion_10_oom_gate() {
    let mut failures = Vec::new();
    let dir = tempfile::tempdir().expect("tempdir");
    for (config, want) in [("oom_gate_fp32.json", 3), ("oom_gate_mixed.json", 0)] {
        let status = Command::new(env!("CARGO_BIN_EXE_gradring"))
            .args(["train", "--config"])
            .arg(workspace_config(config))
            .arg("--out")
            .arg(dir.path().join("gate.csv"))
            .status()
            .expect("spawn");
        let got = status.code().unwrap_or(-1);
        if got != want {
            failures.push(format!("{config}: exit code {got} != {want}"));
        }
    }
    report(10, "16 GiB gate rejects fp32 and admits mixed", &failures);
}
