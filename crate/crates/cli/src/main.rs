//! Command-line front end: synthesize data, train, score, evaluate, cluster
//! and export learned graphs. Every output file records the configuration
//! that produced it.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::json;

use mtgflow::cluster::kshape;
use mtgflow::dataset::{csv_headers, load_csv, load_labels, TimeSeriesTable};
use mtgflow::detect::{auroc, classify, read_scores_csv, write_scores_csv};
use mtgflow::flow::TargetMode;
use mtgflow::graphlearn::{threshold_adjacency, EXPORT_THRESHOLD};
use mtgflow::pipeline::{fit, prepare, score, windows_of, Part};
use mtgflow::synthgen::{generate, write_ground_truth, SynthConfig};
use mtgflow::training::{ModelCheckpoint, TrainConfig};

#[derive(Parser)]
#[command(name = "mtgflow", version, about = "Unsupervised anomaly detection for multivariate time series")]
struct Cli {
    /// Log progress to stderr (repeat for more detail)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with labelled anomalies
    Synth(SynthArgs),
    /// Train a model and write a checkpoint
    Train(TrainArgs),
    /// Score windows with a trained checkpoint
    Score(ScoreArgs),
    /// AUROC of a scores file against window labels
    Eval(EvalArgs),
    /// KShape clustering of the entities of a dataset
    Cluster(ClusterArgs),
    /// Thresholded attention graphs for every window
    ExportGraph(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Entity,
    Cluster,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitPart {
    Train,
    Valid,
    Test,
    All,
}

impl From<SplitPart> for Part {
    fn from(p: SplitPart) -> Self {
        match p {
            SplitPart::Train => Part::Train,
            SplitPart::Valid => Part::Valid,
            SplitPart::Test => Part::Test,
            SplitPart::All => Part::All,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// JSON config with synthesis settings
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset CSV
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth intervals JSON (default: <out>.truth.json)
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset CSV, one column per entity
    #[arg(long)]
    data: PathBuf,
    /// Name of the 0/1 label column, if present
    #[arg(long, default_value = "label")]
    label_column: String,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// JSON config with training settings
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Number of clusters in cluster mode
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    disable_graph: bool,
    #[arg(long)]
    disable_entity_aware: bool,
    /// Output checkpoint JSON
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV (default: <out>.log.csv)
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitPart,
    /// Output scores CSV
    #[arg(long)]
    out: PathBuf,
    /// Thresholds JSON (default: <out>.thresholds.json)
    #[arg(long)]
    thresholds: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Scores CSV written by `score`
    #[arg(long)]
    scores: PathBuf,
    /// Window labels CSV with a `label` column, if the scores file has none
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Report JSON (default: <scores>.eval.json)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ClusterArgs {
    #[command(flatten)]
    data: DataArgs,
    /// JSON config with training settings (split, seed)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    clusters: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitPart,
    /// Edges below this weight are zeroed
    #[arg(long, default_value_t = EXPORT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Bad input from the user (exit 2) or failure while running (exit 1).
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<mtgflow::Error> for Failure {
    fn from(e: mtgflow::Error) -> Self {
        use mtgflow::Error as E;
        match e {
            E::Config(_) | E::Parse { .. } | E::EmptyInput(_) | E::CheckpointVersion(_) => {
                Failure::Usage(e.into())
            }
            other => Failure::Runtime(other.into()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn require(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(anyhow::anyhow!("file not found: {}", path.display())))
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    require(path)?;
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Usage)?;
    serde_json::from_str(&text)
        .with_context(|| format!("invalid config {}", path.display()))
        .map_err(Failure::Usage)
}

fn load_data(args: &DataArgs) -> CliResult<(TimeSeriesTable, bool)> {
    require(&args.data)?;
    let labelled = csv_headers(&args.data)?.contains(&args.label_column);
    let table = load_csv(&args.data, labelled.then_some(args.label_column.as_str()))?;
    Ok((table, labelled))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Sidecar `<file>.provenance.json` for outputs that cannot embed a config.
fn provenance(path: &Path, command: &str, details: serde_json::Value) -> Result<()> {
    write_json(
        &with_suffix(path, ".provenance.json"),
        &json!({ "command": command, "output": path, "details": details }),
    )
}

fn synth(args: SynthArgs) -> CliResult<()> {
    let mut config: SynthConfig = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let (table, intervals) = generate(&config)?;
    table.write_csv(&args.out)?;
    let truth = args.truth.unwrap_or_else(|| with_suffix(&args.out, ".truth.json"));
    write_ground_truth(&config, &intervals, &truth)?;
    provenance(&args.out, "synth", json!({ "config": config, "truth": truth }))?;
    log::info!("wrote {} ({} entities × {} steps)", args.out.display(), table.num_entities(), table.len());
    Ok(())
}

fn train(args: TrainArgs) -> CliResult<()> {
    let mut config: TrainConfig = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(mode) = args.mode {
        config.mode = match mode {
            Mode::Entity => TargetMode::Entity,
            Mode::Cluster => TargetMode::Cluster,
        };
    }
    if let Some(m) = args.clusters {
        config.clusters = m;
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(b) = args.batch_size {
        config.batch_size = b;
    }
    config.disable_graph |= args.disable_graph;
    config.disable_entity_aware |= args.disable_entity_aware;
    config.validate()?;

    let (table, _) = load_data(&args.data)?;
    let fitted = fit(&table, &config)?;
    let ckpt = ModelCheckpoint::new(&fitted.model, &config, fitted.norm, table.entity_names.clone());
    ckpt.save(&args.out)?;
    let log_path = args.log.unwrap_or_else(|| with_suffix(&args.out, ".log.csv"));
    fitted.report.write_csv(&log_path)?;
    provenance(&log_path, "train", json!({ "config": config, "data": args.data.data }))?;
    if let Some(c) = &fitted.clusters {
        let path = with_suffix(&args.out, ".clusters.json");
        c.write_json(&table.entity_names, &path)?;
        provenance(&path, "train", json!({ "config": config }))?;
    }
    log::info!("wrote {}", args.out.display());
    Ok(())
}

fn load_checkpoint(path: &Path, table: &TimeSeriesTable) -> CliResult<ModelCheckpoint> {
    require(path)?;
    let ckpt = ModelCheckpoint::load(path)?;
    if ckpt.entity_names != table.entity_names {
        return Err(Failure::Usage(anyhow::anyhow!(
            "dataset entities {:?} do not match the checkpoint's {:?}",
            table.entity_names,
            ckpt.entity_names
        )));
    }
    Ok(ckpt)
}

fn score_cmd(args: ScoreArgs) -> CliResult<()> {
    require(&args.checkpoint)?;
    let (table, labelled) = load_data(&args.data)?;
    let ckpt = load_checkpoint(&args.checkpoint, &table)?;
    let model = ckpt.model()?;
    let (mut series, thresholds) = score(&model, &ckpt.norm, &table, &ckpt.config, args.split.into())?;
    if !labelled {
        series.labels = None;
    }
    let verdicts = classify(&series, &thresholds);
    write_scores_csv(&series, &verdicts, &table.entity_names, &args.out)?;
    let details = json!({
        "config": ckpt.config,
        "checkpoint": args.checkpoint,
        "data": args.data.data,
    });
    provenance(&args.out, "score", details.clone())?;
    let mut out = thresholds.to_json(&table.entity_names);
    out["provenance"] = details;
    let tpath = args.thresholds.unwrap_or_else(|| with_suffix(&args.out, ".thresholds.json"));
    write_json(&tpath, &out)?;
    let flagged = verdicts.iter().filter(|v| v.anomalous).count();
    log::info!("{flagged} of {} windows above the threshold", verdicts.len());
    Ok(())
}

fn read_labels(path: &Path) -> CliResult<Vec<u8>> {
    require(path)?;
    load_labels(path, "label").map_err(Failure::from)
}

fn eval(args: EvalArgs) -> CliResult<()> {
    require(&args.scores)?;
    let (scores, labels) = read_scores_csv(&args.scores)?;
    let labels = match (&args.labels, labels) {
        (Some(path), _) => read_labels(path)?,
        (None, Some(l)) => l,
        (None, None) => {
            return Err(Failure::Usage(anyhow::anyhow!(
                "{} has no labels; pass --labels",
                args.scores.display()
            )))
        }
    };
    let value = auroc(&labels, &scores)?;
    println!("AUROC {value:.4}");
    let out = args.out.unwrap_or_else(|| with_suffix(&args.scores, ".eval.json"));
    write_json(
        &out,
        &json!({
            "auroc": value,
            "windows": scores.len(),
            "positives": labels.iter().filter(|&&l| l == 1).count(),
            "scores": args.scores,
            "labels": args.labels,
        }),
    )?;
    Ok(())
}

fn cluster(args: ClusterArgs) -> CliResult<()> {
    let mut config: TrainConfig = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.clusters = args.clusters;
    let (table, _) = load_data(&args.data)?;
    let prepared = prepare(&table, &config)?;
    let assignment = kshape(&prepared.train, args.clusters, config.seed, config.kshape_max_iter)?;
    assignment.write_json(&table.entity_names, &args.out)?;
    provenance(
        &args.out,
        "cluster",
        json!({
            "config": config,
            "data": args.data.data,
            "iterations": assignment.iterations,
            "converged": assignment.converged,
            "objective": assignment.objective_history,
        }),
    )?;
    Ok(())
}

fn export_graph(args: ExportArgs) -> CliResult<()> {
    require(&args.checkpoint)?;
    let (table, _) = load_data(&args.data)?;
    let ckpt = load_checkpoint(&args.checkpoint, &table)?;
    if ckpt.model.disable_graph {
        return Err(Failure::Usage(anyhow::anyhow!(
            "{} was trained without the attention graph",
            args.checkpoint.display()
        )));
    }
    let model = ckpt.model()?;
    let (windows, offset) = windows_of(&table, &ckpt.norm, &ckpt.config, args.split.into())?;
    let mut graphs = Vec::with_capacity(windows.len());
    for (i, w) in windows.windows().enumerate() {
        let a = model.adjacency(w, i)?;
        graphs.push(json!({
            "window_start": windows.window_starts[i] + offset,
            "adjacency": threshold_adjacency(&a.a, args.threshold).rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
            "threshold_applied": args.threshold,
        }));
    }
    write_json(
        &args.out,
        &json!({
            "entities": table.entity_names,
            "config": ckpt.config,
            "windows": graphs,
        }),
    )?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Score(a) => score_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Cluster(a) => cluster(a),
        Command::ExportGraph(a) => export_graph(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
