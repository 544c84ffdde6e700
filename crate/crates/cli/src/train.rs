//! The `train` command: stage 1, optional stage 2, resumable at epoch
//! boundaries from `state.json` in the run directory.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use actembed::checkpoint::{checkpoint_path, Checkpoint};
use actembed::dataset::{read_pairs, write_pairs, WeakPair};
use actembed::pipeline::{budget_pairs, files, Prepared};
use actembed::training::{EpochRecord, TrainData, TrainReport, TrainState, Trainer};
use actembed::{Stage, TrainConfig};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::{AtPath, CliError, CliResult};
use crate::manifest::{digest_inputs, RunManifest};

const STATE: &str = "state.json";
const CONFIG: &str = "config.toml";
const PAIRS: &str = "pairs.csv";
const METRICS: &str = "metrics.jsonl";
const LR_TRACE: &str = "lr_trace.csv";

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    prepared: PathBuf,
    /// Run directory for checkpoints, metrics and the manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// TOML config; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Draw weak pairs from this fraction of labeled segments.
    #[arg(long, conflicts_with_all = ["pairs", "stage1_only"])]
    budget: Option<f64>,
    /// Weak pairs file (`a,b,y`).
    #[arg(long, conflicts_with = "stage1_only")]
    pairs: Option<PathBuf>,
    #[arg(long)]
    stage1_only: bool,
    /// Stage-1 temporal consistency weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Stage-1 feature consistency weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Stage-2 label consistency weight.
    #[arg(long)]
    gamma: Option<f64>,
    /// Stage-2 contrastive margin.
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Hidden widths, e.g. `128,64`.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    pairs_per_epoch: Option<usize>,
    /// Any other config key, e.g. `--set stage2.alpha=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue the run in `--out` from its last finished epoch.
    #[arg(long)]
    resume: bool,
    /// Stop after this many epochs in this invocation; `--resume` continues.
    #[arg(long)]
    epoch_limit: Option<usize>,
}

/// Everything needed to pick a run up again.
#[derive(Debug, Serialize, Deserialize)]
struct RunState {
    stage1: Option<TrainReport>,
    current: TrainState,
    stage2_requested: bool,
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    doc.parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn insert(table: &mut toml::Table, key: &str, value: toml::Value) {
    match key.split_once('.') {
        Some((head, rest)) => {
            let entry = table
                .entry(head)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if let toml::Value::Table(t) = entry {
                insert(t, rest, value);
            }
        }
        None => {
            table.insert(key.to_string(), value);
        }
    }
}

fn build_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let base = match &a.config {
        Some(p) => TrainConfig::load(p).at(p)?,
        None => TrainConfig::default(),
    };
    let mut o = toml::Table::new();
    insert(&mut o, "seed", toml::Value::Integer(a.seed as i64));
    let floats = [
        ("stage1.alpha", a.alpha),
        ("stage1.beta", a.beta),
        ("stage2.gamma", a.gamma),
        ("stage2.margin", a.margin),
    ];
    for (k, v) in floats {
        if let Some(v) = v {
            insert(&mut o, k, toml::Value::Float(v));
        }
    }
    let ints = [
        ("batch_size", a.batch_size),
        ("max_epochs", a.max_epochs),
        ("patience", a.patience),
        ("embedding_dim", a.embedding_dim),
        ("pairs_per_epoch", a.pairs_per_epoch),
    ];
    for (k, v) in ints {
        if let Some(v) = v {
            insert(&mut o, k, toml::Value::Integer(v as i64));
        }
    }
    if let Some(h) = &a.hidden {
        let list = h.iter().map(|&w| toml::Value::Integer(w as i64)).collect();
        insert(&mut o, "hidden", toml::Value::Array(list));
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        insert(&mut o, k.trim(), parse_value(v.trim()));
    }
    Ok(base.with_overrides(o)?)
}

fn read_pairs_file(path: &Path) -> CliResult<Vec<WeakPair>> {
    let f = std::fs::File::open(path).at(path)?;
    read_pairs(f).at(path)
}

fn save_state(run: &Path, rs: &RunState) -> CliResult {
    let json = serde_json::to_string(rs).expect("run state serializes");
    crate::write_atomic(&run.join(STATE), json.as_bytes())
}

fn metrics_line(r: &EpochRecord) -> String {
    let mut s = serde_json::to_string(r).expect("epoch record serializes");
    s.push('\n');
    s
}

fn save_checkpoint(run: &Path, stage: Stage, state: &TrainState, prepared: &Prepared, cfg: &TrainConfig) -> CliResult<String> {
    let path = checkpoint_path(run, stage);
    let ckpt = Checkpoint::new(stage, state.global_step, state.best_params.clone(), prepared.norm.clone(), cfg.clone());
    crate::write_atomic(&path, ckpt.to_json().as_bytes())?;
    Ok(path.file_name().expect("checkpoint file name").to_string_lossy().into_owned())
}

fn write_lr_trace(run: &Path, reports: &[&TrainReport]) -> CliResult {
    let mut out = String::from("step,lr\n");
    for pt in reports.iter().flat_map(|r| &r.lr_trace) {
        out.push_str(&format!("{},{:?}\n", pt.step, pt.lr));
    }
    let path = run.join(LR_TRACE);
    std::fs::write(&path, out).at(&path)
}

pub fn cmd_train(a: &TrainArgs) -> CliResult {
    let prepared = crate::load_prepared(&a.prepared)?;
    let run = a.out.as_path();
    let state_path = run.join(STATE);
    let (config, pairs, mut rs, mut manifest) = if a.resume {
        if !state_path.is_file() {
            if let Ok(m) = RunManifest::load(run) {
                if m.seed != a.seed {
                    return Err(CliError::usage(format!("run was started with --seed {}", m.seed)));
                }
                if m.stage1_complete && (m.stage2_complete || !m.stage2_requested) {
                    println!("run in {} is already complete", run.display());
                    return Ok(());
                }
            }
            return Err(CliError::usage(format!("nothing to resume in {}", run.display())));
        }
        let config = TrainConfig::load(run.join(CONFIG)).at(&run.join(CONFIG))?;
        if config.seed != a.seed {
            return Err(CliError::usage(format!("run was started with --seed {}", config.seed)));
        }
        let text = std::fs::read_to_string(&state_path).at(&state_path)?;
        let rs: RunState =
            serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", state_path.display())))?;
        let pairs = if rs.stage2_requested { Some(read_pairs_file(&run.join(PAIRS))?) } else { None };
        // metrics must agree with the state being resumed
        let done: String = rs
            .stage1
            .iter()
            .chain(std::iter::once(&rs.current.report))
            .flat_map(|r| &r.epochs)
            .map(metrics_line)
            .collect();
        std::fs::write(run.join(METRICS), done).at(&run.join(METRICS))?;
        (config, pairs, Some(rs), RunManifest::load(run)?)
    } else {
        if state_path.exists() || run.join(crate::manifest::FILE).exists() {
            return Err(CliError::usage(format!(
                "{} already holds a run; pass --resume or choose another --out",
                run.display()
            )));
        }
        let config = build_config(a)?;
        std::fs::create_dir_all(run).at(run)?;
        let mut inputs: Vec<PathBuf> = files::ALL.iter().map(|f| a.prepared.join(f)).collect();
        let pairs = match (&a.pairs, a.budget) {
            (Some(p), _) => {
                inputs.push(p.clone());
                Some(read_pairs_file(p)?)
            }
            (None, Some(b)) => Some(budget_pairs(&prepared.labels, b, &config)?),
            (None, None) => None,
        };
        let mut manifest = RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config: config.clone(),
            inputs: digest_inputs(&inputs)?,
            artifacts: vec![CONFIG.into(), METRICS.into()],
            stage2_requested: pairs.is_some(),
            stage1_complete: false,
            stage2_complete: false,
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        };
        std::fs::write(run.join(CONFIG), config.to_toml_string()).at(&run.join(CONFIG))?;
        if let Some(p) = &pairs {
            let mut buf = Vec::new();
            write_pairs(&mut buf, p)?;
            std::fs::write(run.join(PAIRS), buf).at(&run.join(PAIRS))?;
            manifest.add_artifact(PAIRS);
        }
        std::fs::write(run.join(METRICS), "").at(&run.join(METRICS))?;
        manifest.save(run)?;
        (config, pairs, None, manifest)
    };
    let trainer = Trainer::new(TrainData::new(&prepared.features, &prepared.neighbors)?, &config)?;
    if rs.is_none() {
        let first = RunState {
            stage1: None,
            current: trainer.start_stage1()?,
            stage2_requested: pairs.is_some(),
        };
        save_state(run, &first)?;
        rs = Some(first);
    }
    let mut rs = rs.expect("state initialized above");

    let metrics_path = run.join(METRICS);
    let mut metrics = std::fs::OpenOptions::new().append(true).open(&metrics_path).at(&metrics_path)?;
    let mut left = a.epoch_limit;
    loop {
        if rs.current.finished {
            match rs.current.stage {
                Stage::One => {
                    let name = save_checkpoint(run, Stage::One, &rs.current, &prepared, &config)?;
                    manifest.add_artifact(&name);
                    manifest.stage1_complete = true;
                    let s = &rs.current.report;
                    println!("stage 1 done: best epoch {} of {}, step {}", s.best_epoch, s.stopping_epoch, s.final_step);
                    if let Some(p) = &pairs {
                        let next = trainer.start_stage2(rs.current.best_params.clone(), rs.current.global_step)?;
                        // validate the pairs before committing to stage 2
                        trainer.split_pairs(p)?;
                        rs.stage1 = Some(std::mem::replace(&mut rs.current, next).report);
                        save_state(run, &rs)?;
                        manifest.save(run)?;
                        continue;
                    }
                }
                Stage::Two => {
                    let name = save_checkpoint(run, Stage::Two, &rs.current, &prepared, &config)?;
                    manifest.add_artifact(&name);
                    manifest.stage2_complete = true;
                    let s = &rs.current.report;
                    println!("stage 2 done: best epoch {} of {}, step {}", s.best_epoch, s.stopping_epoch, s.final_step);
                }
            }
            break;
        }
        if left == Some(0) {
            manifest.save(run)?;
            println!("paused at {} epoch {}; continue with --resume", stage_name(rs.current.stage), rs.current.epoch);
            return Ok(());
        }
        let mut lines = String::new();
        trainer.run(&mut rs.current, pairs.as_deref(), Some(1), &mut |r| lines.push_str(&metrics_line(r)))?;
        metrics.write_all(lines.as_bytes()).at(&metrics_path)?;
        save_state(run, &rs)?;
        left = left.map(|n| n - 1);
    }
    let reports: Vec<&TrainReport> = rs.stage1.iter().chain(std::iter::once(&rs.current.report)).collect();
    write_lr_trace(run, &reports)?;
    manifest.add_artifact(LR_TRACE);
    manifest.save(run)?;
    std::fs::remove_file(&state_path).at(&state_path)?;
    Ok(())
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::One => "stage 1",
        Stage::Two => "stage 2",
    }
}
