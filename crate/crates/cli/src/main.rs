//! `actembed`: prepare sensor data, train the two-stage embedding model and
//! score the resulting clusters.

mod error;
mod manifest;
mod train;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use actembed::checkpoint::Checkpoint;
use actembed::cluster::{cluster_accuracy, export_embeddings, kmeans, Points};
use actembed::dataset::{load_stream, write_pairs, Schema};
use actembed::features::feature_names;
use actembed::pipeline::{budget_pairs, prepare, PrepareOptions, Prepared};
use actembed::synth::{generate, write_dataset};
use actembed::training::embed_all;
use actembed::{SynthConfig, TrainConfig};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use error::{AtPath, CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "actembed", version, about = "Weakly self-supervised activity embeddings")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic labeled dataset (CSV streams plus schema.toml).
    Synth(SynthArgs),
    /// Segment streams, extract features and build neighbor sets.
    Prepare(PrepareArgs),
    /// Draw weak pairs from a labeled fraction of the segments.
    Pairs(PairsArgs),
    /// Train stage 1, then stage 2 when pairs are given.
    Train(train::TrainArgs),
    /// Write embeddings of every prepared segment.
    Embed(EmbedArgs),
    /// Cluster embeddings and report clustering accuracy.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug, Clone)]
struct SynthFlags {
    /// Number of activity classes.
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    subjects: usize,
    #[arg(long, default_value_t = 600.0)]
    seconds: f64,
    #[arg(long, default_value_t = 20.0)]
    rate: f64,
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    #[arg(long, default_value_t = 2.0)]
    noise: f64,
    /// Channels that carry no activity information.
    #[arg(long, default_value_t = 3)]
    noise_channels: usize,
}

impl SynthFlags {
    fn config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            classes: self.classes,
            subjects: self.subjects,
            seconds_per_subject: self.seconds,
            sample_rate_hz: self.rate,
            separation: self.separation,
            noise: self.noise,
            noise_channels: self.noise_channels,
            seed,
            ..SynthConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    flags: SynthFlags,
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Output directory for the prepared artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Schema describing the input CSV files.
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    schema: Option<PathBuf>,
    /// Input stream files, one per recording.
    #[arg(conflicts_with = "synthetic")]
    inputs: Vec<PathBuf>,
    /// Use the built-in generator with this many classes instead of files.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,
    #[arg(long, default_value_t = 2.0)]
    window_s: f64,
    #[arg(long, default_value_t = 1.0)]
    step_s: f64,
    /// Temporal neighbors per segment.
    #[arg(short, default_value_t = 2)]
    m: usize,
    /// Feature-space neighbors per segment.
    #[arg(short, default_value_t = 5)]
    n: usize,
}

#[derive(Args, Debug)]
struct PairsArgs {
    #[arg(long)]
    prepared: PathBuf,
    /// Fraction of segments whose labels may be used.
    #[arg(long)]
    budget: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    pairs_per_epoch: usize,
    #[arg(long, default_value_t = 0.5)]
    positive_ratio: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    prepared: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Append the true label column.
    #[arg(long)]
    with_labels: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    prepared: PathBuf,
    /// Report path (default: `eval.json` next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    export_embeddings: Option<PathBuf>,
    /// k-means seed (default: the checkpoint's training seed).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    restarts: Option<usize>,
}

pub(crate) fn pretty_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

/// Write to a sibling temp file, then rename over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)
}

fn cmd_synth(a: &SynthArgs) -> CliResult {
    let cfg = a.flags.config(a.seed);
    let streams = generate(&cfg)?;
    let written = write_dataset(&a.out, &cfg, &streams).at(&a.out)?;
    let snapshot = a.out.join("synth.toml");
    std::fs::write(&snapshot, toml::to_string(&cfg).expect("synth config is TOML")).at(&snapshot)?;
    println!("wrote {} streams and schema.toml to {}", written.len(), a.out.display());
    Ok(())
}

fn cmd_prepare(a: &PrepareArgs) -> CliResult {
    let (streams, channels) = match (a.synthetic, &a.schema) {
        (Some(classes), _) => {
            let cfg = SynthConfig {
                classes,
                seed: a.synth_seed,
                ..SynthConfig::default()
            };
            (generate(&cfg)?, cfg.channel_names())
        }
        (None, Some(schema_path)) => {
            if !schema_path.is_file() {
                return Err(CliError::usage(format!("schema file {} not found", schema_path.display())));
            }
            if a.inputs.is_empty() {
                return Err(CliError::usage("no input files given"));
            }
            let schema = Schema::load(schema_path).at(schema_path)?;
            let mut streams = Vec::new();
            for p in &a.inputs {
                let (s, stats) = load_stream(p, &schema).at(p)?;
                let dropped = stats.dropped_missing + stats.dropped_label;
                if dropped > 0 {
                    eprintln!("{}: dropped {dropped} of {} rows", p.display(), stats.rows_read);
                }
                streams.push(s);
            }
            (streams, schema.channels.clone())
        }
        (None, None) => return Err(CliError::usage("give --schema with input files, or --synthetic")),
    };
    let opts = PrepareOptions {
        window_s: a.window_s,
        step_s: a.step_s,
        m: a.m,
        n: a.n,
    };
    let prepared = prepare(&streams, &opts)?;
    prepared.save(&a.out, &opts, feature_names(&channels)).at(&a.out)?;
    let s = &prepared.stats;
    println!(
        "{} segments ({} tied windows dropped, {} streams too short), {} features, {} classes",
        s.segments,
        s.tied_discarded,
        s.streams_too_short,
        prepared.norm.dim(),
        prepared.class_count()
    );
    Ok(())
}

fn load_prepared(dir: &Path) -> CliResult<Prepared> {
    if !dir.is_dir() {
        return Err(CliError::usage(format!("prepared directory {} not found", dir.display())));
    }
    Ok(Prepared::load(dir).at(dir)?.0)
}

fn cmd_pairs(a: &PairsArgs) -> CliResult {
    let prepared = load_prepared(&a.prepared)?;
    let cfg = TrainConfig {
        seed: a.seed,
        pairs_per_epoch: a.pairs_per_epoch,
        positive_ratio: a.positive_ratio,
        ..TrainConfig::default()
    };
    let pairs = budget_pairs(&prepared.labels, a.budget, &cfg)?;
    let mut buf = Vec::new();
    write_pairs(&mut buf, &pairs)?;
    std::fs::write(&a.out, buf).at(&a.out)?;
    let pos = pairs.iter().filter(|p| p.is_positive()).count();
    println!("{} pairs ({pos} positive) -> {}", pairs.len(), a.out.display());
    Ok(())
}

/// Normalized features under the checkpoint's own statistics.
fn checkpoint_features(ckpt: &Checkpoint, prepared: &Prepared) -> CliResult<Vec<Vec<f64>>> {
    if ckpt.norm.dim() != prepared.norm.dim() {
        return Err(CliError::data(format!(
            "checkpoint expects {} features, prepared data has {}",
            ckpt.norm.dim(),
            prepared.norm.dim()
        )));
    }
    Ok(prepared.raw.iter().map(|f| ckpt.norm.apply_one(&f.values)).collect())
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn write_embeddings(path: &Path, emb: &[f64], dim: usize, labels: Option<&[i64]>) -> CliResult {
    let mut buf = Vec::new();
    export_embeddings(&mut buf, Points::new(emb, dim)?, labels)?;
    std::fs::write(path, buf).at(path)
}

fn cmd_embed(a: &EmbedArgs) -> CliResult {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let prepared = load_prepared(&a.prepared)?;
    let emb = embed_all(&ckpt.params, &checkpoint_features(&ckpt, &prepared)?)?;
    let labels = if a.with_labels { Some(prepared.all_labels()?) } else { None };
    write_embeddings(&a.out, &emb, ckpt.params.embedding_dim(), labels.as_deref())?;
    println!("{} embeddings of width {} -> {}", prepared.len(), ckpt.params.embedding_dim(), a.out.display());
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> CliResult {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let prepared = load_prepared(&a.prepared)?;
    let labels = prepared.all_labels()?;
    let emb = embed_all(&ckpt.params, &checkpoint_features(&ckpt, &prepared)?)?;
    let k = prepared.class_count();
    let seed = a.seed.unwrap_or(ckpt.config.seed);
    let restarts = a.restarts.unwrap_or(ckpt.config.kmeans_restarts);
    let assignment = kmeans(Points::new(&emb, ckpt.params.embedding_dim())?, k, seed, restarts)?;
    let report = cluster_accuracy(&assignment.labels, k, &labels)?;
    // everything is computed before the first write
    let json = pretty_json(&report);
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.checkpoint.with_file_name("eval.json"));
    std::fs::write(&out, &json).at(&out)?;
    if let Some(path) = &a.export_embeddings {
        write_embeddings(path, &emb, ckpt.params.embedding_dim(), Some(&labels))?;
    }
    std::io::stdout().write_all(json.as_bytes())?;
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Prepare(a) => cmd_prepare(a),
        Command::Pairs(a) => cmd_pairs(a),
        Command::Train(a) => train::cmd_train(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(error::USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
