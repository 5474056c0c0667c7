//! `gradring`: deterministic simulator for data-parallel training
//! strategies, with memory estimation and synthetic data generation.

mod config;

use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gradring_core::memmodel::{self, LayerSpec, OptimizerKind};
use gradring_core::metrics;
use gradring_core::nn::ModelConfig;
use gradring_core::strategies::{self, RunConfig, StrategyError};
use gradring_core::tensor::Dtype;
use gradring_core::datagen;

use config::{ConfigError, Experiment, MemorySection, Overrides};

#[derive(Parser)]
#[command(name = "gradring", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one training run and write a per-step metrics CSV.
    Train(TrainArgs),
    /// Estimate per-worker GPU memory for a model and batch size.
    Memest(MemestArgs),
    /// Run a grid of configurations and write one summary row per cell.
    Sweep(SweepArgs),
    /// Generate a deterministic synthetic token file.
    Datagen(DatagenArgs),
}

#[derive(Args)]
struct RunFlags {
    /// Experiment config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override (highest precedence).
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Strategy override: baseline, sps, sps_grad, dps, ring.
    #[arg(long)]
    strategy: Option<String>,
    /// Precision override: fp32 or mixed.
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    gpus_per_node: Option<usize>,
    #[arg(long)]
    batch_per_worker: Option<usize>,
    /// Step count; 0 validates and runs the memory gate without training.
    #[arg(long)]
    steps: Option<u64>,
}

impl RunFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            strategy: self.strategy.clone(),
            precision: self.precision.clone(),
            nodes: self.nodes,
            gpus_per_node: self.gpus_per_node,
            batch_per_worker: self.batch_per_worker,
            steps: self.steps,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: RunFlags,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    flags: RunFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum BuiltinModel {
    Desk,
    Gpt2Small,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeFlag {
    F64,
    F32,
    F16,
}

impl DtypeFlag {
    fn dtype(self) -> Dtype {
        match self {
            DtypeFlag::F64 => Dtype::F64,
            DtypeFlag::F32 => Dtype::F32,
            DtypeFlag::F16 => Dtype::F16E,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerFlag {
    Sgd,
    SgdMomentum,
    Adam,
}

impl OptimizerFlag {
    fn kind(self) -> OptimizerKind {
        match self {
            OptimizerFlag::Sgd => OptimizerKind::Sgd,
            OptimizerFlag::SgdMomentum => OptimizerKind::SgdMomentum,
            OptimizerFlag::Adam => OptimizerKind::Adam,
        }
    }
}

#[derive(Args)]
struct MemestArgs {
    /// JSON file holding a list of layer specs.
    #[arg(long, conflicts_with = "builtin")]
    model_spec: Option<PathBuf>,
    /// Built-in model to estimate instead of a spec file.
    #[arg(long, value_enum, default_value = "desk")]
    builtin: BuiltinModel,
    /// Sequence length used when expanding a built-in model.
    #[arg(long, default_value_t = 8)]
    seq_len: u64,
    #[arg(long, value_enum, default_value = "sgd")]
    optimizer: OptimizerFlag,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: DtypeFlag,
    /// Global batch size.
    #[arg(long, default_value_t = 1)]
    batch: u64,
    /// Data-parallel worker count.
    #[arg(long, default_value_t = 1)]
    workers: u64,
    /// Model-input elements for the whole batch.
    #[arg(long, default_value_t = 0)]
    input_elements: u64,
    /// Per-sample output-size imbalance, in elements.
    #[arg(long, default_value_t = 0)]
    skew_elements: u64,
    /// Fixed per-worker overhead, in bytes.
    #[arg(long, default_value_t = 0)]
    overhead_bytes: u64,
    /// Per-worker capacity; enables the max-batch line.
    #[arg(long)]
    capacity_bytes: Option<u64>,
    /// Emit the report as JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct DatagenArgs {
    /// Token alphabet size (>= 2).
    #[arg(long)]
    vocab: usize,
    /// Number of tokens to emit.
    #[arg(long)]
    length: u64,
    #[arg(long, default_value_t = 8)]
    seq_len: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("predicted out-of-memory: {0}")]
    Oom(String),
    #[error("{0} sweep cell(s) failed")]
    PartialSweep(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::PartialSweep(_) => 1,
            CliError::Oom(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> CliError {
        CliError::Config(e.to_string())
    }
}

impl From<StrategyError> for CliError {
    fn from(e: StrategyError) -> CliError {
        CliError::Config(e.to_string())
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Memest(args) => cmd_memest(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Datagen(args) => cmd_datagen(args),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

/// Applies the per-worker memory gate when a capacity is configured.
/// Returns the formatted estimate on failure so callers can surface it.
fn memory_gate(run: &RunConfig, memory: &MemorySection) -> Result<(), CliError> {
    let Some(capacity) = memory.capacity_bytes else {
        return Ok(());
    };
    let layers = memmodel::layer_specs_for_model(&run.model, run.seq_len as u64);
    let estimate = strategies::predict_memory(
        &layers,
        run.optimizer.kind,
        run,
        memory.input_elements,
        memory.skew_elements,
        memory.overhead_bytes,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    if estimate.bytes > capacity {
        return Err(CliError::Oom(format!(
            "per-worker estimate {} bytes ({} elements, k = {}) exceeds capacity {} bytes",
            estimate.bytes, estimate.elements, estimate.workers, capacity
        )));
    }
    Ok(())
}

fn open_out(path: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    match path {
        Some(p) => Ok(Box::new(BufWriter::new(File::create(p)?))),
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let Experiment { run, memory, out } = config::load_experiment(
        args.flags.config.as_deref(),
        &args.flags.overrides(),
        args.flags.out.clone(),
    )?;
    memory_gate(&run, &memory)?;

    let workers = run.cluster.world_size();
    if run.steps == 0 {
        let mut w = open_out(&out)?;
        writeln!(w, "{}", metrics::csv_header(workers))?;
        w.flush()?;
        println!("summary: steps=0 (validated; memory gate passed)");
        return Ok(());
    }

    let output = strategies::run(&run)?;
    let mut w = open_out(&out)?;
    metrics::write_csv(&output.rows, workers, &mut w)?;
    w.flush()?;
    let final_loss = output.rows.last().map(|r| r.loss).unwrap_or(f64::NAN);
    let summary = format!(
        "summary: steps={} final_loss={} sim_time_s={} mean_utilization={} skipped={}",
        run.steps,
        final_loss,
        output.total_time,
        output.mean_utilization(),
        output.skipped_steps
    );
    if out.is_some() {
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    Ok(())
}

fn cmd_memest(args: MemestArgs) -> Result<(), CliError> {
    let layers: Vec<LayerSpec> = match &args.model_spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("bad layer spec file: {e}")))?
        }
        None => {
            let model = match args.builtin {
                BuiltinModel::Desk => ModelConfig::desk(),
                BuiltinModel::Gpt2Small => ModelConfig::gpt2_small(),
            };
            memmodel::layer_specs_for_model(&model, args.seq_len)
        }
    };
    let dtype = args.dtype.dtype();
    let kind = args.optimizer.kind();
    let est = memmodel::estimate(&layers, kind, args.batch, args.input_elements, dtype)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let per_worker = memmodel::per_worker(
        &est,
        args.workers,
        args.skew_elements,
        args.overhead_bytes,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let max_batch = args.capacity_bytes.map(|cap| {
        memmodel::max_batch(
            &layers,
            kind,
            dtype,
            cap,
            args.workers,
            args.input_elements,
            args.skew_elements,
            args.overhead_bytes,
        )
    });

    if args.json {
        let mut report = serde_json::json!({
            "p_m": est.p_m,
            "n": est.n,
            "p_o": est.p_o,
            "p_b": est.p_b,
            "batch": est.batch,
            "dtype_bytes": est.dtype_bytes,
            "m_elements": est.elements,
            "m_bytes": est.bytes,
            "workers": per_worker.workers,
            "m_i_elements": per_worker.elements,
            "m_i_bytes": per_worker.bytes,
        });
        if let Some(mb) = max_batch {
            report["max_batch"] = mb.into();
        }
        println!("{}", serde_json::to_string_pretty(&report).expect("report is plain data"));
    } else {
        println!("p_m = {}", est.p_m);
        println!("n = {}", est.n);
        println!("p_o = {}", est.p_o);
        println!("p_b = {}", est.p_b);
        println!("M = {} bytes ({} elements, batch {})", est.bytes, est.elements, est.batch);
        println!(
            "M_i = {} bytes per worker (k = {})",
            per_worker.bytes, per_worker.workers
        );
        if let Some(mb) = max_batch {
            println!("max_batch = {mb}");
        }
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let path = args
        .flags
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("sweep requires --config".into()))?;
    let plan = config::load_sweep(path, &args.flags.overrides(), args.flags.out.clone())?;

    let mut rows = String::new();
    let mut failed = 0usize;
    writeln!(
        rows,
        "name,strategy,precision,nodes,gpus_per_node,batch_per_worker,steps,status,sim_time_s,final_loss,mean_utilization"
    )
    .expect("string write");
    for cell in &plan.cells {
        let run = match &cell.run {
            Ok(run) => run,
            Err(e) => {
                eprintln!("cell {}: {e}", cell.name);
                failed += 1;
                writeln!(rows, "{},,,,,,,failed,,,", cell.name).expect("string write");
                continue;
            }
        };
        let precision = if run.precision.is_mixed() { "mixed" } else { "fp32" };
        let strategy = serde_json::to_value(run.strategy)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        let prefix = format!(
            "{},{},{},{},{},{},{}",
            cell.name,
            strategy,
            precision,
            run.cluster.nodes,
            run.cluster.gpus_per_node,
            run.per_worker_batch,
            run.steps
        );
        let outcome = memory_gate(run, &plan.memory)
            .and_then(|()| strategies::run(run).map_err(CliError::from));
        match outcome {
            Ok(output) => {
                let final_loss = output.rows.last().map(|r| r.loss).unwrap_or(f64::NAN);
                writeln!(
                    rows,
                    "{prefix},ok,{},{},{}",
                    output.total_time,
                    final_loss,
                    output.mean_utilization()
                )
                .expect("string write");
            }
            Err(e) => {
                eprintln!("cell {}: {e}", cell.name);
                failed += 1;
                writeln!(rows, "{prefix},failed,,,").expect("string write");
            }
        }
    }

    let mut w = open_out(&plan.out)?;
    w.write_all(rows.as_bytes())?;
    w.flush()?;
    if failed > 0 {
        return Err(CliError::PartialSweep(failed));
    }
    Ok(())
}

fn cmd_datagen(args: DatagenArgs) -> Result<(), CliError> {
    if args.vocab < 2 {
        return Err(CliError::Config(format!(
            "vocab must be at least 2, got {}",
            args.vocab
        )));
    }
    if args.seq_len == 0 {
        return Err(CliError::Config("seq_len must be at least 1".into()));
    }
    let seed = match args.seed {
        Some(s) => s,
        None => match std::env::var(config::SEED_ENV) {
            Ok(raw) => raw.trim().parse::<u64>().map_err(|_| {
                CliError::Config(format!(
                    "{} must be an unsigned integer, got {raw:?}",
                    config::SEED_ENV
                ))
            })?,
            Err(_) => 0,
        },
    };
    let cfg = datagen::DatagenConfig::for_model(args.vocab, args.seq_len);
    let mut w = open_out(&args.out)?;
    let mut written = 0u64;
    let mut index = 0u64;
    while written < args.length {
        let seq = datagen::sequence(&cfg, seed, index);
        for token in seq {
            if written == args.length {
                break;
            }
            writeln!(w, "{token}")?;
            written += 1;
        }
        index += 1;
    }
    w.flush()?;
    Ok(())
}
