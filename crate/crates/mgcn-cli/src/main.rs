//! `mgcn` — command line front end for the distributed GCN toolkit.
//!
//! Subcommands cover the full pipeline:
//!
//! * `partition` — split a graph into P balanced parts and report cut size.
//! * `plan`      — build the pairwise communication plan and volume table.
//! * `train`     — run multi-worker full-batch training (in-process or TCP).
//! * `perfmodel` — evaluate the analytic communication time model.
//! * `bench`     — time the naive vs planned scatter-add kernels.
//!
//! Exit codes: 0 on success, 1 for runtime failures (divergence, transport),
//! 2 for usage and configuration errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand, ValueEnum};

use mgcn::commplan::{plan_all, save_plan, volumes_csv};
use mgcn::engine::{
    metrics_csv, run_worker, save_checkpoint, train_in_process, Activation, ModelKind,
    ModelParams, OptimizerKind, TrainConfig,
};
use mgcn::graph::{
    build_subgraphs, import_partition, load_features, load_graph, load_labels, load_mask,
    partition_weighted, save_partition, CsrGraph, GraphFormat, WeightMode,
};
use mgcn::kernels::bench_index_add;
use mgcn::perfmodel::{
    speedup, t_comm, t_quant_comm, PerfModelInputs, SpeedupMode, SpeedupRatios,
};
use mgcn::quant::BitWidth;
use mgcn::transport::{env_rank, TcpEndpoint, TcpRendezvous};
use mgcn::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mgcn",
    version,
    about = "Distributed full-batch GCN training with communication-minimal boundary exchange"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Partition a graph into balanced parts and report cut statistics.
    Partition(PartitionArgs),
    /// Build the pairwise communication plan and write the volume table.
    Plan(PlanArgs),
    /// Train a model over a partitioned graph.
    Train(Box<TrainArgs>),
    /// Evaluate the analytic communication performance model.
    Perfmodel(PerfmodelArgs),
    /// Benchmark the scatter-add aggregation kernels.
    Bench(BenchArgs),
}

// ---------------------------------------------------------------------------
// Shared value enums
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    /// Whitespace-separated `src dst` pairs, one edge per line.
    EdgeList,
    /// Packed CSR structure + features written by this tool.
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    Fp32,
    Int2,
    Int4,
    Int8,
}

impl PrecisionArg {
    fn bits(self) -> Option<BitWidth> {
        match self {
            PrecisionArg::Fp32 => None,
            PrecisionArg::Int2 => Some(BitWidth::Int2),
            PrecisionArg::Int4 => Some(BitWidth::Int4),
            PrecisionArg::Int8 => Some(BitWidth::Int8),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Sage,
    Gcn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ActivationArg {
    Relu,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    /// All workers as threads inside this process.
    Inproc,
    /// One worker per process, connected through a rendezvous file.
    Tcp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum WeightModeArg {
    /// Every node weighs 1.
    Uniform,
    /// Weight by in-degree plus a training-mask bonus.
    Degree,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SweepArg {
    /// Sweep worker count at fixed total volume.
    P,
    /// Sweep the latency/transfer ratio at fixed volume.
    Delta,
}

// ---------------------------------------------------------------------------
// Entry point and exit-code mapping
// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// Runtime failures (things that can only surface while the job is running)
/// exit 1; everything the user could have fixed up front exits 2.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } | Error::Transport(_) | Error::MatchingNotMaximum { .. } => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Partition(args) => cmd_partition(args),
        Cmd::Plan(args) => cmd_plan(args),
        Cmd::Train(args) => cmd_train(*args),
        Cmd::Perfmodel(args) => cmd_perfmodel(args),
        Cmd::Bench(args) => cmd_bench(args),
    }
}

// ---------------------------------------------------------------------------
// Common helpers
// ---------------------------------------------------------------------------

fn detect_format(path: &Path, explicit: Option<FormatArg>) -> GraphFormat {
    match explicit {
        Some(FormatArg::EdgeList) => GraphFormat::EdgeList,
        Some(FormatArg::Binary) => GraphFormat::BinaryCsr,
        None => match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("csr") | Some("mgcn") => GraphFormat::BinaryCsr,
            _ => GraphFormat::EdgeList,
        },
    }
}

fn load_graph_arg(
    path: &Path,
    format: Option<FormatArg>,
    directed: bool,
    num_nodes: Option<usize>,
) -> Result<CsrGraph<f32>> {
    load_graph(path, detect_format(path, format), !directed, num_nodes)
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads the highest part id in a partition file so `--parts` can be omitted.
fn infer_num_parts(path: &Path) -> Result<usize> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut max_part: Option<usize> = None;
    for (idx, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let part: usize = line
            .parse()
            .map_err(|_| Error::parse(path, idx + 1, format!("bad part id {line:?}")))?;
        max_part = Some(max_part.map_or(part, |m: usize| m.max(part)));
    }
    match max_part {
        Some(m) => Ok(m + 1),
        None => Err(Error::format(path, "partition file is empty")),
    }
}

// ---------------------------------------------------------------------------
// partition
// ---------------------------------------------------------------------------

#[derive(Parser)]
struct PartitionArgs {
    /// Input graph file.
    #[arg(long)]
    graph: PathBuf,
    /// Graph file format (inferred from the extension when omitted).
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Node count override for edge lists with isolated tail nodes.
    #[arg(long)]
    num_nodes: Option<usize>,
    /// Keep edges one-directional instead of symmetrizing.
    #[arg(long)]
    directed: bool,
    /// Number of parts.
    #[arg(long)]
    parts: usize,
    /// RNG seed for the placement heuristic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Node weighting used when balancing parts.
    #[arg(long, value_enum, default_value_t = WeightModeArg::Degree)]
    weight_mode: WeightModeArg,
    /// Extra weight for training nodes under the degree mode.
    #[arg(long)]
    lambda: Option<f64>,
    /// Optional training-mask sidecar (informs the degree weighting).
    #[arg(long)]
    train_mask: Option<PathBuf>,
    /// Output directory (partition.txt is written here).
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn cmd_partition(args: PartitionArgs) -> Result<()> {
    if args.parts == 0 {
        return Err(Error::Config("--parts must be at least 1".into()));
    }
    let mut g = load_graph_arg(&args.graph, args.format, args.directed, args.num_nodes)?;
    if let Some(mask_path) = &args.train_mask {
        let train = load_mask(mask_path, g.num_nodes())?;
        let n = g.num_nodes();
        g.set_masks(train, vec![false; n], vec![false; n])?;
    }
    let mode = match args.weight_mode {
        WeightModeArg::Uniform => WeightMode::Uniform,
        WeightModeArg::Degree => WeightMode::InDegreePlusTrainMask { lambda: args.lambda },
    };
    let partition = partition_weighted(&g, args.parts, mode, args.seed)?;
    ensure_out_dir(&args.out)?;
    let out_path = args.out.join("partition.txt");
    save_partition(&partition, &out_path)?;
    println!(
        "partition: nodes={} edges={} parts={} cut_edges={} imbalance={:.4}",
        g.num_nodes(),
        g.num_edges(),
        partition.num_parts,
        partition.cut_edges(&g),
        partition.imbalance()
    );
    println!("wrote {}", out_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// plan
// ---------------------------------------------------------------------------

#[derive(Parser)]
struct PlanArgs {
    /// Input graph file.
    #[arg(long)]
    graph: PathBuf,
    /// Graph file format (inferred from the extension when omitted).
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Node count override for edge lists with isolated tail nodes.
    #[arg(long)]
    num_nodes: Option<usize>,
    /// Keep edges one-directional instead of symmetrizing.
    #[arg(long)]
    directed: bool,
    /// Partition file (one part id per node line).
    #[arg(long)]
    partition: PathBuf,
    /// Number of parts (inferred from the partition file when omitted).
    #[arg(long)]
    parts: Option<usize>,
    /// Output directory (plan.bin and volumes.csv are written here).
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn cmd_plan(args: PlanArgs) -> Result<()> {
    let g = load_graph_arg(&args.graph, args.format, args.directed, args.num_nodes)?;
    let parts = match args.parts {
        Some(p) if p >= 1 => p,
        Some(_) => return Err(Error::Config("--parts must be at least 1".into())),
        None => infer_num_parts(&args.partition)?,
    };
    let partition = import_partition(&args.partition, g.num_nodes(), parts)?;
    let subs = build_subgraphs(&g, &partition)?;
    let plan = plan_all(&subs)?;
    ensure_out_dir(&args.out)?;
    let plan_path = args.out.join("plan.bin");
    let csv_path = args.out.join("volumes.csv");
    save_plan(&plan, &plan_path)?;
    write_text(&csv_path, &volumes_csv(&plan))?;
    let t = plan.total_volumes();
    let hybrid_ratio = if t.vanilla > 0 {
        t.hybrid as f64 / t.vanilla as f64
    } else {
        0.0
    };
    println!(
        "plan: parts={} vanilla={} pre={} post={} hybrid={} hybrid/vanilla={:.3}",
        parts, t.vanilla, t.pre_only, t.post_only, t.hybrid, hybrid_ratio
    );
    println!("wrote {} and {}", plan_path.display(), csv_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Parser)]
struct TrainArgs {
    /// Optional `key = value` config file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input graph file.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Graph file format (inferred from the extension when omitted).
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Node count override for edge lists with isolated tail nodes.
    #[arg(long)]
    num_nodes: Option<usize>,
    /// Keep edges one-directional instead of symmetrizing.
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    directed: Option<bool>,
    /// Feature sidecar: one whitespace-separated row per node.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Label sidecar: one integer per node, -1 for unlabeled.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Training-mask sidecar: one 0/1 per node.
    #[arg(long)]
    train_mask: Option<PathBuf>,
    /// Validation-mask sidecar.
    #[arg(long)]
    val_mask: Option<PathBuf>,
    /// Test-mask sidecar.
    #[arg(long)]
    test_mask: Option<PathBuf>,
    /// Pre-computed partition file; mutually exclusive with computing one.
    #[arg(long)]
    partition: Option<PathBuf>,
    /// Number of workers.
    #[arg(long)]
    parts: Option<usize>,
    /// Wire precision for boundary rows.
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    /// Mix masked training labels into the input features.
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    label_prop: Option<bool>,
    /// Per-epoch keep probability for training labels.
    #[arg(long)]
    label_rate: Option<f64>,
    /// Training epochs (0 evaluates the initial model only).
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Number of graph layers.
    #[arg(long)]
    layers: Option<usize>,
    /// Hidden width.
    #[arg(long)]
    hidden: Option<usize>,
    /// Seed for weight init, label sampling, and rounding streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Aggregation model.
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Nonlinearity between layers.
    #[arg(long, value_enum)]
    activation: Option<ActivationArg>,
    /// Weight-update rule.
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Quantize backward-pass boundary gradients too.
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    quantize_backward: Option<bool>,
    /// Normalize activations before each layer.
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    layer_norm: Option<bool>,
    /// Learn additive bias terms.
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    bias: Option<bool>,
    /// Worker transport.
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Rendezvous file listing one host:port per rank (TCP backend).
    #[arg(long)]
    rendezvous: Option<PathBuf>,
    /// This process's rank (TCP backend; MGCN_RANK env also works).
    #[arg(long)]
    rank: Option<usize>,
    /// Output directory (metrics.csv and checkpoint.bin are written here).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Fully resolved training invocation after merging config file, flags, and
/// defaults.
struct TrainPlan {
    graph: PathBuf,
    format: Option<FormatArg>,
    num_nodes: Option<usize>,
    directed: bool,
    features: Option<PathBuf>,
    labels: Option<PathBuf>,
    train_mask: Option<PathBuf>,
    val_mask: Option<PathBuf>,
    test_mask: Option<PathBuf>,
    partition: Option<PathBuf>,
    parts: usize,
    cfg: TrainConfig,
    backend: BackendArg,
    rendezvous: Option<PathBuf>,
    rank: Option<usize>,
    out: PathBuf,
}

fn resolve_train(args: TrainArgs) -> Result<TrainPlan> {
    let file = match &args.config {
        Some(path) => parse_config_file(path)?,
        None => BTreeMap::new(),
    };
    let mut file = ConfigMap::new(args.config.clone().unwrap_or_default(), file);

    let graph = args
        .graph
        .or(file.take_path("graph")?)
        .ok_or_else(|| Error::Config("a graph file is required (--graph or config `graph`)".into()))?;
    // Always consume the file's value so leftover-key detection still works
    // when a command-line flag overrides it.
    let format = args.format.or(file.take_enum::<FormatArg>("format")?);
    let precision = args.precision.or(file.take_enum::<PrecisionArg>("precision")?);
    let model = args.model.or(file.take_enum::<ModelArg>("model")?);
    let activation = args.activation.or(file.take_enum::<ActivationArg>("activation")?);
    let optimizer = args.optimizer.or(file.take_enum::<OptimizerArg>("optimizer")?);
    let backend = args.backend.or(file.take_enum::<BackendArg>("backend")?);

    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        num_layers: args.layers.or(file.take_parsed("layers")?).unwrap_or(defaults.num_layers),
        hidden_dim: args.hidden.or(file.take_parsed("hidden")?).unwrap_or(defaults.hidden_dim),
        epochs: args.epochs.or(file.take_parsed("epochs")?).unwrap_or(defaults.epochs),
        lr: args.lr.or(file.take_parsed("lr")?).unwrap_or(defaults.lr),
        bits: precision.map_or(defaults.bits, PrecisionArg::bits),
        quantize_backward: args
            .quantize_backward
            .or(file.take_parsed("quantize_backward")?)
            .unwrap_or(defaults.quantize_backward),
        label_prop: args.label_prop.or(file.take_parsed("label_prop")?).unwrap_or(defaults.label_prop),
        label_rate: args.label_rate.or(file.take_parsed("label_rate")?).unwrap_or(defaults.label_rate),
        seed: args.seed.or(file.take_parsed("seed")?).unwrap_or(defaults.seed),
        model: match model {
            Some(ModelArg::Sage) => ModelKind::Sage,
            Some(ModelArg::Gcn) => ModelKind::Gcn,
            None => defaults.model,
        },
        activation: match activation {
            Some(ActivationArg::Relu) => Activation::Relu,
            Some(ActivationArg::Linear) => Activation::Linear,
            None => defaults.activation,
        },
        layer_norm: args.layer_norm.or(file.take_parsed("layer_norm")?).unwrap_or(defaults.layer_norm),
        bias: args.bias.or(file.take_parsed("bias")?).unwrap_or(defaults.bias),
        optimizer: match optimizer {
            Some(OptimizerArg::Sgd) => OptimizerKind::Sgd,
            Some(OptimizerArg::Adam) => OptimizerKind::Adam,
            None => defaults.optimizer,
        },
        ..defaults
    };

    let plan = TrainPlan {
        graph,
        format,
        num_nodes: args.num_nodes.or(file.take_parsed("num_nodes")?),
        directed: args.directed.or(file.take_parsed("directed")?).unwrap_or(false),
        features: args.features.or(file.take_path("features")?),
        labels: args.labels.or(file.take_path("labels")?),
        train_mask: args.train_mask.or(file.take_path("train_mask")?),
        val_mask: args.val_mask.or(file.take_path("val_mask")?),
        test_mask: args.test_mask.or(file.take_path("test_mask")?),
        partition: args.partition.or(file.take_path("partition")?),
        parts: args.parts.or(file.take_parsed("parts")?).unwrap_or(1),
        cfg,
        backend: backend.unwrap_or(BackendArg::Inproc),
        rendezvous: args.rendezvous.or(file.take_path("rendezvous")?),
        rank: args.rank.or(file.take_parsed("rank")?),
        out: args.out.or(file.take_path("out")?).unwrap_or_else(|| PathBuf::from(".")),
    };
    file.finish()?;

    if plan.parts == 0 {
        return Err(Error::Config("--parts must be at least 1".into()));
    }
    plan.cfg.validate()?;
    Ok(plan)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let plan = resolve_train(args)?;

    let mut g = load_graph_arg(&plan.graph, plan.format, plan.directed, plan.num_nodes)?;
    let n = g.num_nodes();
    if let Some(path) = &plan.features {
        g.set_features(load_features(path, n)?)?;
    }
    if let Some(path) = &plan.labels {
        g.set_labels(load_labels(path, n)?)?;
    }
    if plan.train_mask.is_some() || plan.val_mask.is_some() || plan.test_mask.is_some() {
        let read = |p: &Option<PathBuf>| -> Result<Vec<bool>> {
            match p {
                Some(path) => load_mask(path, n),
                None => Ok(vec![false; n]),
            }
        };
        g.set_masks(read(&plan.train_mask)?, read(&plan.val_mask)?, read(&plan.test_mask)?)?;
    }
    if g.num_classes() == 0 {
        return Err(Error::Config(
            "no labels present; supply --labels (graph files carry structure and features only)".into(),
        ));
    }
    if g.feature_dim() == 0 {
        return Err(Error::Config("graph has zero-width features; supply --features".into()));
    }

    let partition = match &plan.partition {
        Some(path) => {
            let parts = infer_num_parts(path)?.max(plan.parts);
            import_partition(path, n, parts)?
        }
        None => partition_weighted(&g, plan.parts, WeightMode::InDegreePlusTrainMask { lambda: None }, plan.cfg.seed)?,
    };

    ensure_out_dir(&plan.out)?;
    match plan.backend {
        BackendArg::Inproc => {
            let run = train_in_process::<f32>(&g, &partition, &plan.cfg)?;
            finish_train(&plan.out, &run.metrics, &run.params)
        }
        BackendArg::Tcp => {
            let rank = match plan.rank {
                Some(r) => r,
                None => env_rank()?.ok_or_else(|| {
                    Error::Config("TCP backend needs --rank or the MGCN_RANK environment variable".into())
                })?,
            };
            let rv_path = plan.rendezvous.as_ref().ok_or_else(|| {
                Error::Config("TCP backend needs --rendezvous FILE (one host:port per rank)".into())
            })?;
            let rv = TcpRendezvous::from_file(rv_path, rank)?;
            if rv.peers.len() != partition.num_parts {
                return Err(Error::Config(format!(
                    "rendezvous lists {} endpoints but the partition has {} parts",
                    rv.peers.len(),
                    partition.num_parts
                )));
            }
            let subs = build_subgraphs(&g, &partition)?;
            let comm_plan = plan_all(&subs)?;
            let num_classes = g.num_classes();
            let mut ep = TcpEndpoint::connect(&rv)?;
            let out = run_worker::<f32>(&subs[rank], &comm_plan, &plan.cfg, num_classes, &mut ep)?;
            if rank == 0 {
                finish_train(&plan.out, &out.metrics, &out.params)
            } else {
                Ok(())
            }
        }
    }
}

fn finish_train(out_dir: &Path, metrics: &[mgcn::engine::EpochMetrics], params: &ModelParams<f32>) -> Result<()> {
    let metrics_path = out_dir.join("metrics.csv");
    let ckpt_path = out_dir.join("checkpoint.bin");
    write_text(&metrics_path, &metrics_csv(metrics))?;
    save_checkpoint(params, &ckpt_path)?;
    if let Some(last) = metrics.last() {
        println!(
            "train: epochs={} final_loss={:.6} test_acc={:.4} total_bytes={}",
            metrics.len(),
            last.loss,
            last.test_acc,
            metrics.iter().map(|m| m.bytes_sent).sum::<u64>()
        );
    } else {
        println!("train: epochs=0 (evaluation-only run)");
    }
    println!("wrote {} and {}", metrics_path.display(), ckpt_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Config file parsing (`key = value`, `#` comments)
// ---------------------------------------------------------------------------

fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::parse(path, idx + 1, format!("expected `key = value`, got {raw:?}")));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(Error::parse(path, idx + 1, "empty key or value"));
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::parse(path, idx + 1, format!("duplicate key {key:?}")));
        }
    }
    Ok(map)
}

/// Wraps the raw key/value map so every lookup is typed and leftover keys are
/// reported as config errors instead of being silently ignored.
struct ConfigMap {
    path: PathBuf,
    map: BTreeMap<String, String>,
}

impl ConfigMap {
    fn new(path: PathBuf, map: BTreeMap<String, String>) -> Self {
        ConfigMap { path, map }
    }

    fn take_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("bad value {v:?} for key {key:?} in {}", self.path.display()))
            }),
        }
    }

    fn take_path(&mut self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.map.remove(key).map(PathBuf::from))
    }

    fn take_enum<T: ValueEnum + Clone>(&mut self, key: &str) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => T::from_str(&v, true).map(Some).map_err(|_| {
                Error::Config(format!("bad value {v:?} for key {key:?} in {}", self.path.display()))
            }),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(key) = self.map.keys().next() {
            return Err(Error::Config(format!(
                "unknown config key {key:?} in {}",
                self.path.display()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// perfmodel
// ---------------------------------------------------------------------------

#[derive(Parser)]
struct PerfmodelArgs {
    /// `key = value` model inputs: p, comm, params, subgraph, bw, latency,
    /// th_cal, bits (volumes in elements per pair, rates in bits/s).
    #[arg(long)]
    inputs: PathBuf,
    /// Produce a sweep CSV instead of only the point estimate.
    #[arg(long, value_enum)]
    sweep: Option<SweepArg>,
    /// Lower end of the sweep range.
    #[arg(long)]
    sweep_min: Option<f64>,
    /// Upper end of the sweep range.
    #[arg(long)]
    sweep_max: Option<f64>,
    /// Number of sweep points.
    #[arg(long, default_value_t = 25)]
    sweep_steps: usize,
    /// When set, the sweep CSV goes to DIR/sweep.csv instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct PerfInputsFile {
    inputs: PerfModelInputs,
    comm_per_pair: f64,
    params_per_pair: f64,
    subgraph_per_worker: f64,
}

fn parse_perf_inputs(path: &Path) -> Result<PerfInputsFile> {
    let raw = parse_config_file(path)?;
    let mut file = ConfigMap::new(path.to_path_buf(), raw);
    let p: usize = file
        .take_parsed("p")?
        .ok_or_else(|| Error::Config(format!("missing key \"p\" in {}", path.display())))?;
    let need = |v: Option<f64>, key: &str| {
        v.ok_or_else(|| Error::Config(format!("missing key {key:?} in {}", path.display())))
    };
    let comm = need(file.take_parsed("comm")?, "comm")?;
    let params = file.take_parsed("params")?.unwrap_or(0.0);
    let subgraph = file.take_parsed("subgraph")?.unwrap_or(0.0);
    let bw = need(file.take_parsed("bw")?, "bw")?;
    let latency = file.take_parsed("latency")?.unwrap_or(0.0);
    let th_cal = need(file.take_parsed("th_cal")?, "th_cal")?;
    let bits: u32 = file
        .take_parsed("bits")?
        .ok_or_else(|| Error::Config(format!("missing key \"bits\" in {}", path.display())))?;
    file.finish()?;
    let inputs = PerfModelInputs::uniform(p, comm, params, subgraph, bw, latency, th_cal, bits);
    inputs.validate()?;
    Ok(PerfInputsFile { inputs, comm_per_pair: comm, params_per_pair: params, subgraph_per_worker: subgraph })
}

/// Exact and approximate speedups for a table or sweep row.
///
/// When the parameter volume is zero the data/parameter ratio alpha is
/// undefined, so the exact column falls back to the measured plain/quantized
/// time ratio and the approximation keeps only the compression and latency
/// terms.
struct SpeedupSummary {
    exact: f64,
    approx: f64,
    delta: f64,
    ratios: Option<SpeedupRatios>,
}

fn summarize_speedup(
    inputs: &PerfModelInputs,
    comm_per_pair: f64,
    plain: f64,
    quant_total: f64,
) -> SpeedupSummary {
    match SpeedupRatios::from_inputs(inputs) {
        Ok(r) => SpeedupSummary {
            exact: speedup(&r, SpeedupMode::Exact),
            approx: speedup(&r, SpeedupMode::Approx),
            delta: r.delta,
            ratios: Some(r),
        },
        Err(_) => {
            let gamma = 32.0 / inputs.bits as f64;
            let transfer = comm_per_pair * inputs.bits as f64 / inputs.bw;
            let delta = if transfer > 0.0 { inputs.latency / transfer } else { 0.0 };
            SpeedupSummary {
                exact: if quant_total > 0.0 { plain / quant_total } else { f64::INFINITY },
                approx: (gamma + delta) / (1.0 + delta),
                delta,
                ratios: None,
            }
        }
    }
}

fn cmd_perfmodel(args: PerfmodelArgs) -> Result<()> {
    let file = parse_perf_inputs(&args.inputs)?;
    let inputs = &file.inputs;

    let plain = t_comm(inputs)?;
    let quant = t_quant_comm(inputs, false)?;
    let s = summarize_speedup(inputs, file.comm_per_pair, plain, quant.total);
    let regime = if s.delta > 1.0 { "latency-bound" } else { "bandwidth-bound" };

    println!("communication model (P={}, bits={})", inputs.p, inputs.bits);
    println!("  plain exchange time:     {:>12.6e} s", plain);
    println!("  quantized pre-reduce:    {:>12.6e} s", quant.pre_quant);
    println!("  quantized encode:        {:>12.6e} s", quant.quant);
    println!("  quantized wire:          {:>12.6e} s", quant.wire);
    println!("  quantized decode:        {:>12.6e} s", quant.dequant);
    println!("  quantized total:         {:>12.6e} s", quant.total);
    println!("  speedup (exact):         {:>12.4}", s.exact);
    println!("  speedup (approx):        {:>12.4}", s.approx);
    match &s.ratios {
        Some(r) => println!(
            "  ratios: alpha={:.4} beta={:.4} gamma={:.4} delta={:.4}",
            r.alpha, r.beta, r.gamma, r.delta
        ),
        None => println!("  ratios: alpha undefined (zero parameter volume), delta={:.4}", s.delta),
    }
    println!("  regime: {regime}");
    let approx_err = if s.exact != 0.0 && s.exact.is_finite() {
        ((s.exact - s.approx) / s.exact).abs()
    } else {
        0.0
    };
    if approx_err > 0.10 {
        println!(
            "# warning: closed-form approximation off by {:.1}% (latency or calc terms are not negligible)",
            approx_err * 100.0
        );
    }

    if let Some(sweep) = args.sweep {
        let csv = match sweep {
            SweepArg::P => sweep_p(&file, &args)?,
            SweepArg::Delta => sweep_delta(&file, &args)?,
        };
        match &args.out {
            Some(dir) => {
                ensure_out_dir(dir)?;
                let path = dir.join("sweep.csv");
                write_text(&path, &csv)?;
                println!("wrote {}", path.display());
            }
            None => print!("{csv}"),
        }
    }
    Ok(())
}

/// Sweeps worker count while holding the total exchanged volume fixed, so
/// per-pair volume shrinks as 1/(P(P-1)) and per-worker subgraph work as 1/P.
fn sweep_p(file: &PerfInputsFile, args: &PerfmodelArgs) -> Result<String> {
    let base = &file.inputs;
    let lo = args.sweep_min.unwrap_or(2.0).max(2.0) as usize;
    let hi = args.sweep_max.unwrap_or(64.0).max(lo as f64) as usize;
    let stride = ((hi - lo) / args.sweep_steps.max(1)).max(1);
    let base_pairs = (base.p * base.p.saturating_sub(1)).max(1) as f64;
    let total_comm = file.comm_per_pair * base_pairs;
    let total_params = file.params_per_pair * base_pairs;
    let total_subgraph = file.subgraph_per_worker * base.p as f64;

    let mut out = String::from("p,plain_s,quant_s,speedup_exact,speedup_approx\n");
    let mut rows = 0usize;
    let mut p = lo;
    while p <= hi {
        let pairs = (p * (p - 1)) as f64;
        let inputs = PerfModelInputs::uniform(
            p,
            total_comm / pairs,
            total_params / pairs,
            total_subgraph / p as f64,
            base.bw,
            base.latency,
            base.th_cal,
            base.bits,
        );
        let plain = t_comm(&inputs)?;
        let quant = t_quant_comm(&inputs, false)?;
        let s = summarize_speedup(&inputs, total_comm / pairs, plain, quant.total);
        out.push_str(&format!(
            "{p},{plain:.6e},{:.6e},{:.4},{:.4}\n",
            quant.total, s.exact, s.approx
        ));
        rows += 1;
        p += stride;
    }
    let cross = mgcn::perfmodel::crossover(total_comm, base.bits, base.bw, base.latency, lo, hi)?;
    out.push_str(&format!(
        "# rows={} plain_latency_bound_at={} quant_latency_bound_at={}\n",
        rows,
        cross.plain_p.map_or("none".to_string(), |p| p.to_string()),
        cross.quant_p.map_or("none".to_string(), |p| p.to_string()),
    ));
    Ok(out)
}

/// Sweeps the latency/transfer ratio delta by scaling the latency input.
fn sweep_delta(file: &PerfInputsFile, args: &PerfmodelArgs) -> Result<String> {
    let base = &file.inputs;
    let lo = args.sweep_min.unwrap_or(0.0).max(0.0);
    let hi = args.sweep_max.unwrap_or(4.0).max(lo);
    let steps = args.sweep_steps.max(2);
    let transfer = file.comm_per_pair * base.bits as f64 / base.bw;
    if transfer <= 0.0 {
        return Err(Error::Config("delta sweep needs a positive per-pair volume".into()));
    }
    let mut out = String::from("delta,latency_s,plain_s,quant_s,speedup_exact,speedup_approx\n");
    let mut max_err = 0.0f64;
    for i in 0..steps {
        let delta = lo + (hi - lo) * i as f64 / (steps - 1) as f64;
        let inputs = PerfModelInputs::uniform(
            base.p,
            file.comm_per_pair,
            file.params_per_pair,
            file.subgraph_per_worker,
            base.bw,
            delta * transfer,
            base.th_cal,
            base.bits,
        );
        let plain = t_comm(&inputs)?;
        let quant = t_quant_comm(&inputs, false)?;
        let s = summarize_speedup(&inputs, file.comm_per_pair, plain, quant.total);
        if s.exact != 0.0 && s.exact.is_finite() {
            max_err = max_err.max(((s.exact - s.approx) / s.exact).abs());
        }
        out.push_str(&format!(
            "{delta:.4},{:.6e},{plain:.6e},{:.6e},{:.4},{:.4}\n",
            delta * transfer,
            quant.total,
            s.exact,
            s.approx
        ));
    }
    out.push_str(&format!("# max_approx_error={:.2}%\n", max_err * 100.0));
    Ok(out)
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

#[derive(Parser)]
struct BenchArgs {
    /// Thread counts to benchmark, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    threads: Vec<usize>,
    /// Scattered source rows per measurement.
    #[arg(long, default_value_t = 100_000)]
    src_rows: usize,
    /// Destination rows (accumulator height).
    #[arg(long, default_value_t = 10_000)]
    dst_rows: usize,
    /// Feature width.
    #[arg(long, default_value_t = 64)]
    feat: usize,
    /// Timed iterations per configuration (best is kept).
    #[arg(long, default_value_t = 3)]
    iters: usize,
    /// Workload seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    if args.threads.is_empty() || args.threads.contains(&0) {
        return Err(Error::Config("--threads needs at least one nonzero entry".into()));
    }
    if args.src_rows == 0 || args.dst_rows == 0 || args.feat == 0 || args.iters == 0 {
        return Err(Error::Config("bench sizes and iterations must be nonzero".into()));
    }
    println!("src_rows,dst_rows,feat,threads,naive_ns,opt_ns,speedup");
    let mut best: Option<(usize, f64)> = None;
    for &t in &args.threads {
        let point = bench_index_add(args.src_rows, args.dst_rows, args.feat, t, args.iters, args.seed);
        println!(
            "{},{},{},{},{},{},{:.3}",
            point.src_rows,
            point.dst_rows,
            point.f,
            point.threads,
            point.naive_ns,
            point.opt_ns,
            point.speedup()
        );
        if best.is_none_or(|(_, s)| point.speedup() > s) {
            best = Some((t, point.speedup()));
        }
    }
    let (bt, bs) = best.unwrap();
    println!("# best speedup={bs:.3} at threads={bt}");
    Ok(())
}
