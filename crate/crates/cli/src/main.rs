//! gridplace: generate circuits, collect offline placement data, train the
//! graph encoder and the placement policy, finetune, place, evaluate, and
//! render layouts.
//!
//! Every stage is deterministic given its seed; outputs are byte-identical
//! across runs except the explicitly named wall-time files.

mod render;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gridplace::canvas::GridSpec;
use gridplace::data::{build_dataset, load_dataset, BuildConfig};
use gridplace::model::{ModelConfig, Policy};
use gridplace::netlist::{
    generate_synthetic, parse_bookshelf, parse_canonical, serialize_canonical, to_graph, Netlist,
};
use gridplace::tensor::load_checkpoint;
use gridplace::training::{evaluate, finetune, pretrain, FinetuneConfig, PretrainConfig};
use gridplace::vgae::{self, VgaeParams};

/// Exit codes by error class.
const EXIT_USAGE: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_STAGE: u8 = 4;
const EXIT_BAD_DATA: u8 = 5;

struct CliError {
    code: u8,
    error: anyhow::Error,
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError { code: EXIT_USAGE, error: e.into() }
}

fn missing(e: impl Into<anyhow::Error>) -> CliError {
    CliError { code: EXIT_MISSING, error: e.into() }
}

fn stage(e: impl Into<anyhow::Error>) -> CliError {
    CliError { code: EXIT_STAGE, error: e.into() }
}

fn bad_data(e: impl Into<anyhow::Error>) -> CliError {
    CliError { code: EXIT_BAD_DATA, error: e.into() }
}

#[derive(Parser)]
#[command(name = "gridplace", version, about = "Grid macro placement pipeline")]
struct Cli {
    /// JSON config file supplying defaults; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

/// File-backed defaults for the common knobs.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    seed: Option<u64>,
    grid: Option<usize>,
    budget: Option<usize>,
    workers: Option<usize>,
    temperature: Option<f64>,
    per_circuit: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    t_max: Option<usize>,
    layers: Option<usize>,
    hidden: Option<usize>,
    heads: Option<usize>,
    vgae_epochs: Option<usize>,
    anneal_sweeps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic circuit and write its canonical text form.
    Gen(GenArgs),
    /// Parse a circuit (canonical or Bookshelf subset), validate, and
    /// re-serialize canonically.
    Parse(ParseArgs),
    /// Collect an offline dataset: proxy-expert trajectories plus the
    /// trained graph encoder and cached circuit tokens.
    Collect(CollectArgs),
    /// Train the graph encoder alone and report held-out edge AUC.
    TrainVgae(TrainVgaeArgs),
    /// Behavior-clone the policy on an offline dataset.
    Pretrain(PretrainArgs),
    /// Return-weighted finetuning on one circuit.
    Finetune(FinetuneArgs),
    /// Produce a placement with a trained policy: SVG plus metrics.
    Place(PlaceArgs),
    /// Fixed-budget evaluation across seeds with mean/std summary.
    Eval(EvalArgs),
    /// Render a circuit (optionally with a placement) as SVG.
    Render(RenderArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 8)]
    macros: usize,
    #[arg(long, default_value_t = 12)]
    nets: usize,
    /// Canvas as `W` (square) or `WxH`.
    #[arg(long, default_value = "64")]
    canvas: String,
    #[arg(long, default_value_t = 0.3)]
    util: f64,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParseArgs {
    /// Canonical circuit file.
    #[arg(long, conflicts_with_all = ["nodes", "nets"])]
    input: Option<PathBuf>,
    /// Bookshelf .nodes file (use with --nets).
    #[arg(long, requires = "nets")]
    nodes: Option<PathBuf>,
    #[arg(long)]
    nets: Option<PathBuf>,
    #[arg(long)]
    pl: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CollectArgs {
    /// Canonical circuit files.
    #[arg(long, required = true, num_args = 1..)]
    circuits: Vec<PathBuf>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    per_circuit: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vgae_epochs: Option<usize>,
    #[arg(long)]
    anneal_sweeps: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainVgaeArgs {
    #[arg(long, required = true, num_args = 1..)]
    circuits: Vec<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of edges held out for the AUC report.
    #[arg(long, default_value_t = 0.1)]
    holdout: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Context length in macros; defaults to the longest dataset trajectory.
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Use the full-size architecture defaults instead of the desk preset.
    #[arg(long, default_value_t = false)]
    paper_width: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    circuit: PathBuf,
    /// Dataset dir providing the graph encoder (or pass --vgae).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    vgae: Option<PathBuf>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlaceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    circuit: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    vgae: Option<PathBuf>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    circuit: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    vgae: Option<PathBuf>,
    #[arg(long)]
    budget: Option<usize>,
    /// Number of evaluation seeds.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    circuit: PathBuf,
    /// Placement JSON from `place`; only fixed modules without it.
    #[arg(long)]
    placement: Option<PathBuf>,
    /// Draw per-net bounding boxes.
    #[arg(long, default_value_t = false)]
    net_boxes: bool,
    #[arg(long)]
    out: PathBuf,
}

/// Placement artifact: anchor cells per module id.
#[derive(Debug, Serialize, Deserialize)]
struct PlacementFile {
    circuit: String,
    grid_n: usize,
    anchors: Vec<AnchorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnchorEntry {
    id: usize,
    gx: usize,
    gy: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match load_run_config(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            return ExitCode::from(e.code);
        }
    };
    let result = match cli.command {
        Command::Gen(args) => run_gen(args, &config),
        Command::Parse(args) => run_parse(args),
        Command::Collect(args) => run_collect(args, &config),
        Command::TrainVgae(args) => run_train_vgae(args, &config),
        Command::Pretrain(args) => run_pretrain(args, &config),
        Command::Finetune(args) => run_finetune(args, &config),
        Command::Place(args) => run_place(args, &config),
        Command::Eval(args) => run_eval(args, &config),
        Command::Render(args) => run_render(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}

fn load_run_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))
                .map_err(missing)?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", p.display()))
                .map_err(usage)
        }
    }
}

/// Resolve an output path against `GRIDPLACE_OUT` when it is relative.
fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("GRIDPLACE_OUT") {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn parse_canvas(spec: &str) -> CliResult<(f64, f64)> {
    let parts: Vec<&str> = spec.split(['x', ',']).collect();
    let parse = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| usage(anyhow!("bad canvas '{spec}'")))
    };
    match parts.as_slice() {
        [w] => {
            let w = parse(w)?;
            Ok((w, w))
        }
        [w, h] => Ok((parse(w)?, parse(h)?)),
        _ => Err(usage(anyhow!("bad canvas '{spec}'"))),
    }
}

fn read_circuit(path: &Path) -> CliResult<Netlist> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading circuit {}", path.display()))
        .map_err(missing)?;
    parse_canonical(&text)
        .with_context(|| format!("parsing circuit {}", path.display()))
        .map_err(bad_data)
}

fn write_artifact(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| stage(anyhow!(e)))?;
    }
    fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(stage)
}

fn write_config_snapshot<T: Serialize>(dir: &Path, effective: &T) -> CliResult<()> {
    let json = serde_json::to_string_pretty(effective).expect("config serializes");
    write_artifact(&dir.join("config.json"), json.as_bytes())
}

/// Load the graph encoder from either a dataset directory or a checkpoint.
fn load_vgae(dataset: Option<&Path>, vgae_path: Option<&Path>) -> CliResult<VgaeParams> {
    match (dataset, vgae_path) {
        (_, Some(path)) => {
            let (_, params) = load_checkpoint(path)
                .with_context(|| format!("loading encoder {}", path.display()))
                .map_err(missing)?;
            Ok(VgaeParams::from_params(params))
        }
        (Some(dir), None) => {
            let manifest_text = fs::read_to_string(dir.join("manifest.json"))
                .with_context(|| format!("reading manifest in {}", dir.display()))
                .map_err(missing)?;
            let manifest: serde_json::Value =
                serde_json::from_str(&manifest_text).map_err(|e| bad_data(anyhow!(e)))?;
            let file = manifest["vgae_file"]
                .as_str()
                .ok_or_else(|| bad_data(anyhow!("manifest lacks vgae_file")))?;
            let (_, params) = load_checkpoint(&dir.join(file))
                .context("loading dataset encoder")
                .map_err(missing)?;
            Ok(VgaeParams::from_params(params))
        }
        (None, None) => Err(usage(anyhow!("pass --dataset or --vgae for the circuit token"))),
    }
}

fn token_for(netlist: &Netlist, vgae_params: &VgaeParams) -> CliResult<Vec<f32>> {
    vgae::circuit_token(&to_graph(netlist), vgae_params)
        .map_err(|e| stage(anyhow!("computing circuit token: {e}")))
}

fn run_gen(args: GenArgs, config: &RunConfig) -> CliResult<()> {
    let seed = args.seed.or(config.seed).unwrap_or(0);
    let canvas = parse_canvas(&args.canvas)?;
    let netlist = generate_synthetic(seed, args.macros, args.nets, canvas, args.util)
        .map_err(|e| usage(anyhow!("generating circuit: {e}")))?;
    let text = serialize_canonical(&netlist);
    match args.out {
        Some(path) => {
            let path = resolve_out(&path);
            write_artifact(&path, text.as_bytes())?;
            println!(
                "wrote {} ({} macros, {} nets)",
                path.display(),
                netlist.modules.len(),
                netlist.nets.len()
            );
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run_parse(args: ParseArgs) -> CliResult<()> {
    let netlist = match (&args.input, &args.nodes) {
        (Some(input), None) => read_circuit(input)?,
        (None, Some(nodes)) => {
            let nodes_text = fs::read_to_string(nodes)
                .with_context(|| format!("reading {}", nodes.display()))
                .map_err(missing)?;
            let nets_path = args.nets.as_ref().expect("clap enforces --nets");
            let nets_text = fs::read_to_string(nets_path)
                .with_context(|| format!("reading {}", nets_path.display()))
                .map_err(missing)?;
            let pl_text = match &args.pl {
                Some(p) => Some(
                    fs::read_to_string(p)
                        .with_context(|| format!("reading {}", p.display()))
                        .map_err(missing)?,
                ),
                None => None,
            };
            parse_bookshelf(&nodes_text, &nets_text, pl_text.as_deref())
                .map_err(|e| bad_data(anyhow!("parsing bookshelf input: {e}")))?
        }
        _ => return Err(usage(anyhow!("pass --input FILE or --nodes/--nets"))),
    };
    let pins: usize = netlist.nets.iter().map(|n| n.pins.len()).sum();
    println!(
        "circuit {}: {} modules, {} nets, {} pins, canvas {:?}",
        netlist.name,
        netlist.modules.len(),
        netlist.nets.len(),
        pins,
        netlist.canvas
    );
    if let Some(out) = args.out {
        let out = resolve_out(&out);
        write_artifact(&out, serialize_canonical(&netlist).as_bytes())?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn run_collect(args: CollectArgs, config: &RunConfig) -> CliResult<()> {
    let out = resolve_out(&args.out);
    let circuits: Vec<Netlist> = args
        .circuits
        .iter()
        .map(|p| read_circuit(p))
        .collect::<CliResult<_>>()?;
    let grid = args.grid.or(config.grid).unwrap_or(84);
    let build = BuildConfig {
        per_circuit: args.per_circuit.or(config.per_circuit).unwrap_or(500),
        temperature: args.temperature.or(config.temperature).unwrap_or(0.1),
        seed: args.seed.or(config.seed).unwrap_or(0),
        vgae_epochs: args
            .vgae_epochs
            .or(config.vgae_epochs)
            .unwrap_or(vgae::DEFAULT_EPOCHS),
        anneal_sweeps: args.anneal_sweeps.or(config.anneal_sweeps).unwrap_or(0),
        workers: args.workers.or(config.workers).unwrap_or(1).max(1),
    };
    let dataset = build_dataset(&circuits, grid, &build, &out)
        .map_err(|e| stage(anyhow!("building dataset: {e}")))?;
    println!(
        "dataset at {}: {} circuits x {} trajectories, grid {}",
        out.display(),
        dataset.manifest.circuits.len(),
        dataset.manifest.per_circuit,
        grid
    );
    Ok(())
}

fn run_train_vgae(args: TrainVgaeArgs, config: &RunConfig) -> CliResult<()> {
    let out = resolve_out(&args.out);
    let circuits: Vec<Netlist> = args
        .circuits
        .iter()
        .map(|p| read_circuit(p))
        .collect::<CliResult<_>>()?;
    let epochs = args
        .epochs
        .or(config.vgae_epochs)
        .unwrap_or(vgae::DEFAULT_EPOCHS);
    let seed = args.seed.or(config.seed).unwrap_or(0);

    // Hold out edges per graph for the reported AUC.
    let graphs: Vec<_> = circuits.iter().map(to_graph).collect();
    let mut train_graphs = Vec::new();
    let mut holdouts = Vec::new();
    for (i, g) in graphs.iter().enumerate() {
        let (reduced, held) = vgae::split_edges(g, args.holdout, seed + i as u64);
        train_graphs.push(reduced);
        holdouts.push(held);
    }
    let outcome = vgae::train(&train_graphs, epochs, vgae::DEFAULT_LR, seed)
        .map_err(|e| stage(anyhow!("training graph encoder: {e}")))?;

    let mut pos_scores = Vec::new();
    let mut neg_scores = Vec::new();
    for (i, g) in train_graphs.iter().enumerate() {
        if holdouts[i].is_empty() {
            continue;
        }
        let negatives = vgae::sample_non_edges(&graphs[i], holdouts[i].len(), seed + 31 + i as u64);
        pos_scores.extend(
            vgae::edge_score(g, &outcome.params, &holdouts[i]).map_err(|e| stage(anyhow!(e)))?,
        );
        neg_scores.extend(
            vgae::edge_score(g, &outcome.params, &negatives).map_err(|e| stage(anyhow!(e)))?,
        );
    }
    let auc = vgae::auc(&pos_scores, &neg_scores);
    gridplace::tensor::save_checkpoint(
        &out,
        &format!("{{\"seed\":{seed},\"epochs\":{epochs}}}"),
        &outcome.params.params,
    )
    .map_err(|e| stage(anyhow!(e)))?;
    println!(
        "trained on {} graphs for {epochs} epochs; final loss {:.4}; held-out AUC {:.4}",
        circuits.len(),
        outcome.loss_history.last().copied().unwrap_or(f64::NAN),
        auc
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn run_pretrain(args: PretrainArgs, config: &RunConfig) -> CliResult<()> {
    let out = resolve_out(&args.out);
    let dataset = load_dataset(&args.dataset)
        .map_err(|e| bad_data(anyhow!("loading dataset: {e}")))?;
    let longest = dataset
        .pairs()
        .iter()
        .map(|(_, t)| t.actions.len())
        .max()
        .unwrap_or(1);
    let t_max = args.t_max.or(config.t_max).unwrap_or(longest);
    let grid_n = dataset.manifest.grid_n;
    let mut model_config = if args.paper_width {
        ModelConfig {
            grid_n,
            t_max,
            ..ModelConfig::default()
        }
    } else {
        ModelConfig::desk(grid_n, t_max)
    };
    if let Some(layers) = args.layers.or(config.layers) {
        model_config.layers = layers;
    }
    if let Some(hidden) = args.hidden.or(config.hidden) {
        model_config.hidden = hidden;
    }
    if let Some(heads) = args.heads.or(config.heads) {
        model_config.heads = heads;
    }
    let train_config = PretrainConfig {
        batch_size: args.batch_size.or(config.batch_size).unwrap_or(32),
        lr: args.lr.or(config.lr).unwrap_or(6e-4),
        epochs: args.epochs.or(config.epochs).unwrap_or(50),
        seed: args.seed.or(config.seed).unwrap_or(0),
        ..PretrainConfig::default()
    };
    fs::create_dir_all(&out).map_err(|e| stage(anyhow!(e)))?;
    write_config_snapshot(&out, &(&model_config, &train_config))?;
    let outcome = pretrain(&dataset, model_config, &train_config, Some(&out))
        .map_err(|e| stage(anyhow!("pretraining: {e}")))?;
    println!(
        "pretrained {} epochs; loss {:.4} -> {:.4}; checkpoint {}",
        train_config.epochs,
        outcome.loss_history.first().copied().unwrap_or(f64::NAN),
        outcome.loss_history.last().copied().unwrap_or(f64::NAN),
        out.join("policy.ckpt").display()
    );
    Ok(())
}

/// Wall time is the one nondeterministic field; it goes to walltime.txt and
/// is zeroed in the deterministic artifacts.
fn scrub_walltime(record: &gridplace::training::EvalRecord) -> gridplace::training::EvalRecord {
    let mut clean = record.clone();
    clean.wall_time_ms = 0;
    clean
}

fn run_finetune(args: FinetuneArgs, config: &RunConfig) -> CliResult<()> {
    let out = resolve_out(&args.out);
    let netlist = read_circuit(&args.circuit)?;
    let mut policy = Policy::load(&args.checkpoint)
        .map_err(|e| missing(anyhow!("loading checkpoint: {e}")))?;
    let vgae_params = load_vgae(args.dataset.as_deref(), args.vgae.as_deref())?;
    let token = token_for(&netlist, &vgae_params)?;
    let ft_config = FinetuneConfig {
        budget: args.budget.or(config.budget).unwrap_or(300),
        batch_size: args.batch_size.or(config.batch_size).unwrap_or(32),
        lr: args.lr.or(config.lr).unwrap_or(1e-4),
        ..FinetuneConfig::default()
    };
    let seed = args.seed.or(config.seed).unwrap_or(0);
    fs::create_dir_all(&out).map_err(|e| stage(anyhow!(e)))?;
    write_config_snapshot(&out, &ft_config)?;
    let outcome = finetune(&mut policy, &netlist, &token, &ft_config, seed)
        .map_err(|e| stage(anyhow!("finetuning: {e}")))?;
    policy
        .save(&out.join("policy.ckpt"))
        .map_err(|e| stage(anyhow!(e)))?;
    let record_json = serde_json::to_string_pretty(&scrub_walltime(&outcome.record))
        .expect("record serializes");
    write_artifact(&out.join("record.json"), record_json.as_bytes())?;
    let trace: String = outcome
        .record
        .trace
        .iter()
        .map(|h| format!("{h:?}\n"))
        .collect();
    write_artifact(&out.join("trace.txt"), trace.as_bytes())?;
    let buffer_trace: String = outcome
        .buffer_min_trace
        .iter()
        .map(|h| format!("{h:?}\n"))
        .collect();
    write_artifact(&out.join("buffer_min.txt"), buffer_trace.as_bytes())?;
    write_artifact(
        &out.join("walltime.txt"),
        format!("{}\n", outcome.record.wall_time_ms).as_bytes(),
    )?;
    println!(
        "finetuned on {} for {} rollouts; best HPWL {:.3}",
        netlist.name, outcome.record.rollouts_used, outcome.record.best_hpwl
    );
    Ok(())
}

fn run_place(args: PlaceArgs, config: &RunConfig) -> CliResult<()> {
    let out = resolve_out(&args.out);
    let netlist = read_circuit(&args.circuit)?;
    let policy = Policy::load(&args.checkpoint)
        .map_err(|e| missing(anyhow!("loading checkpoint: {e}")))?;
    let vgae_params = load_vgae(args.dataset.as_deref(), args.vgae.as_deref())?;
    let token = token_for(&netlist, &vgae_params)?;
    let budget = args.budget.or(config.budget).unwrap_or(1);
    let seed = args.seed.or(config.seed).unwrap_or(0);
    let temperature = args.temperature.or(config.temperature).unwrap_or(0.0);

    let outcomes = evaluate(&policy, &netlist, &token, budget, &[seed], temperature)
        .map_err(|e| stage(anyhow!("placement rollouts: {e}")))?;
    let outcome = &outcomes[0];

    fs::create_dir_all(&out).map_err(|e| stage(anyhow!(e)))?;
    let placement = PlacementFile {
        circuit: netlist.name.clone(),
        grid_n: policy.config.grid_n,
        anchors: outcome
            .best_anchors
            .iter()
            .map(|(&id, &(gx, gy))| AnchorEntry { id, gx, gy })
            .collect(),
    };
    write_artifact(
        &out.join("placement.json"),
        serde_json::to_string_pretty(&placement)
            .expect("serializes")
            .as_bytes(),
    )?;
    write_artifact(
        &out.join("metrics.json"),
        serde_json::to_string_pretty(&outcome.report)
            .expect("serializes")
            .as_bytes(),
    )?;
    write_artifact(&out.join("metrics.txt"), outcome.report.to_kv_text().as_bytes())?;
    let positions = placement_positions(&netlist, &placement)?;
    write_artifact(
        &out.join("layout.svg"),
        render::render_svg(&netlist, &positions, true).as_bytes(),
    )?;
    println!(
        "placed {}: HPWL {:.3}, overlap {:.4}",
        netlist.name, outcome.report.hpwl, outcome.report.overlap_ratio
    );
    Ok(())
}

fn placement_positions(
    netlist: &Netlist,
    placement: &PlacementFile,
) -> CliResult<BTreeMap<usize, (f64, f64)>> {
    let grid =
        GridSpec::new(placement.grid_n, netlist.canvas).map_err(|e| bad_data(anyhow!(e)))?;
    let mut positions = BTreeMap::new();
    for entry in &placement.anchors {
        positions.insert(
            entry.id,
            (entry.gx as f64 * grid.cell_w, entry.gy as f64 * grid.cell_h),
        );
    }
    for m in netlist.fixed_modules() {
        positions.insert(m.id, m.fixed_pos.expect("validated"));
    }
    Ok(positions)
}

#[derive(Serialize)]
struct EvalSummary {
    circuit: String,
    budget: usize,
    seeds: usize,
    mean_hpwl: f64,
    std_hpwl: f64,
    per_seed: Vec<f64>,
    overlap_max: f64,
}

fn run_eval(args: EvalArgs, config: &RunConfig) -> CliResult<()> {
    let out = resolve_out(&args.out);
    let netlist = read_circuit(&args.circuit)?;
    let vgae_params = load_vgae(args.dataset.as_deref(), args.vgae.as_deref())?;
    let token = token_for(&netlist, &vgae_params)?;
    let budget = args.budget.or(config.budget).unwrap_or(300);
    let n_seeds = args.seeds.unwrap_or(5);
    let temperature = args.temperature.or(config.temperature).unwrap_or(0.5);
    let workers = args.workers.or(config.workers).unwrap_or(1).max(1);
    let seeds: Vec<u64> = (0..n_seeds as u64).collect();

    // The policy holds shared interior state, so each worker loads its own
    // copy from the checkpoint.
    let mut outcomes = Vec::new();
    if workers <= 1 {
        let policy = Policy::load(&args.checkpoint)
            .map_err(|e| missing(anyhow!("loading checkpoint: {e}")))?;
        outcomes = evaluate(&policy, &netlist, &token, budget, &seeds, temperature)
            .map_err(|e| stage(anyhow!("evaluation: {e}")))?;
    } else {
        let chunk = seeds.len().div_ceil(workers);
        let results: Vec<CliResult<Vec<gridplace::training::EvalOutcome>>> =
            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for part in seeds.chunks(chunk) {
                    let checkpoint = args.checkpoint.clone();
                    let netlist = &netlist;
                    let token = &token;
                    handles.push(scope.spawn(move || {
                        let policy = Policy::load(&checkpoint)
                            .map_err(|e| missing(anyhow!("loading checkpoint: {e}")))?;
                        evaluate(&policy, netlist, token, budget, part, temperature)
                            .map_err(|e| stage(anyhow!("evaluation: {e}")))
                    }));
                }
                handles
                    .into_iter()
                    .map(|h| h.join().expect("worker panicked"))
                    .collect()
            });
        for r in results {
            outcomes.extend(r?);
        }
    }

    let per_seed: Vec<f64> = outcomes.iter().map(|o| o.record.best_hpwl).collect();
    let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    let var =
        per_seed.iter().map(|h| (h - mean) * (h - mean)).sum::<f64>() / per_seed.len() as f64;
    let summary = EvalSummary {
        circuit: netlist.name.clone(),
        budget,
        seeds: n_seeds,
        mean_hpwl: mean,
        std_hpwl: var.sqrt(),
        per_seed,
        overlap_max: outcomes
            .iter()
            .map(|o| o.report.overlap_ratio)
            .fold(0.0, f64::max),
    };
    fs::create_dir_all(&out).map_err(|e| stage(anyhow!(e)))?;
    write_artifact(
        &out.join("summary.json"),
        serde_json::to_string_pretty(&summary)
            .expect("serializes")
            .as_bytes(),
    )?;
    for (i, outcome) in outcomes.iter().enumerate() {
        let trace: String = outcome
            .record
            .trace
            .iter()
            .map(|h| format!("{h:?}\n"))
            .collect();
        write_artifact(&out.join(format!("trace_seed{i}.txt")), trace.as_bytes())?;
    }
    let walltimes: String = outcomes
        .iter()
        .map(|o| format!("{}\n", o.record.wall_time_ms))
        .collect();
    write_artifact(&out.join("walltime.txt"), walltimes.as_bytes())?;
    println!(
        "eval {}: best HPWL {:.3} ± {:.3} over {} seeds (budget {})",
        summary.circuit, summary.mean_hpwl, summary.std_hpwl, n_seeds, budget
    );
    if summary.overlap_max > 0.0 {
        return Err(stage(anyhow!(
            "placement overlap detected: {}",
            summary.overlap_max
        )));
    }
    Ok(())
}

fn run_render(args: RenderArgs) -> CliResult<()> {
    let out = resolve_out(&args.out);
    let netlist = read_circuit(&args.circuit)?;
    let positions = match &args.placement {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading placement {}", path.display()))
                .map_err(missing)?;
            let placement: PlacementFile =
                serde_json::from_str(&text).map_err(|e| bad_data(anyhow!(e)))?;
            if placement.circuit != netlist.name {
                return Err(bad_data(anyhow!(
                    "placement is for '{}', circuit is '{}'",
                    placement.circuit,
                    netlist.name
                )));
            }
            placement_positions(&netlist, &placement)?
        }
        None => {
            let mut positions = BTreeMap::new();
            for m in netlist.fixed_modules() {
                positions.insert(m.id, m.fixed_pos.expect("validated"));
            }
            positions
        }
    };
    write_artifact(
        &out,
        render::render_svg(&netlist, &positions, args.net_boxes).as_bytes(),
    )?;
    println!("wrote {}", out.display());
    Ok(())
}
