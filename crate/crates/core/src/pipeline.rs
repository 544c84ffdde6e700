//! End-to-end helpers: streams to prepared training inputs, training under a
//! label budget, and evaluation of the resulting embeddings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::{cluster_accuracy, kmeans, EvalReport, Points};
use crate::config::TrainConfig;
use crate::dataset::{
    make_budget_split, make_weak_pairs, read_segment_manifest, segment, write_segment_records, ClassId,
    SegmentRecord, SensorStream, WeakPair,
};
use crate::error::{Error, Result};
use crate::features::{
    apply_normalizer, extract_all, fit_normalizer, read_feature_csv, write_feature_csv, FeatureVector, NormStats,
};
use crate::model::ModelParams;
use crate::neighbors::{NeighborIndex, SegmentPosition};
use crate::training::{embed_all, train_stage1, train_stage2, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareOptions {
    pub window_s: f64,
    pub step_s: f64,
    pub m: usize,
    pub n: usize,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            window_s: 2.0,
            step_s: 1.0,
            m: 2,
            n: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrepareStats {
    pub segments: usize,
    pub tied_discarded: usize,
    pub streams_too_short: usize,
}

/// Segments of all streams in order, their normalized features and the
/// frozen neighbor index.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub positions: Vec<SegmentPosition>,
    pub labels: Vec<Option<ClassId>>,
    pub raw: Vec<FeatureVector>,
    pub norm: NormStats,
    pub features: Vec<Vec<f64>>,
    pub neighbors: NeighborIndex,
    pub stats: PrepareStats,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Labels of every segment; errors if any segment is unlabeled.
    pub fn all_labels(&self) -> Result<Vec<ClassId>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::EmptyInput(format!("segment {i} has no label"))))
            .collect()
    }

    pub fn class_count(&self) -> usize {
        let mut c: Vec<ClassId> = self.labels.iter().flatten().copied().collect();
        c.sort_unstable();
        c.dedup();
        c.len()
    }
}

/// File names inside a prepared-artifact directory.
pub mod files {
    pub const SEGMENTS: &str = "segments.csv";
    pub const FEATURES: &str = "features.csv";
    pub const NORM: &str = "norm.json";
    pub const NEIGHBORS: &str = "neighbors.csv";
    pub const SUMMARY: &str = "prepare.json";
    pub const ALL: [&str; 5] = [SEGMENTS, FEATURES, NORM, NEIGHBORS, SUMMARY];
}

/// Contents of `prepare.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub options: PrepareOptions,
    pub stats: PrepareStats,
    pub feature_names: Vec<String>,
}

impl Prepared {
    /// Writes the artifact set into `dir`; returns the paths written.
    ///
    /// Raw features are stored with round-trip decimals and the normalized
    /// matrix is recomputed from them on load, so a reload is bit-identical.
    pub fn save(&self, dir: &Path, opts: &PrepareOptions, feature_names: Vec<String>) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let records: Vec<SegmentRecord> = self
            .positions
            .iter()
            .zip(&self.labels)
            .map(|(p, &label)| SegmentRecord {
                stream_id: p.stream_id,
                position: p.index,
                label,
            })
            .collect();
        let summary = PrepareSummary {
            options: *opts,
            stats: self.stats.clone(),
            feature_names,
        };
        let mut out = Vec::new();
        for name in files::ALL {
            let path = dir.join(name);
            let mut buf = Vec::new();
            match name {
                files::SEGMENTS => write_segment_records(&mut buf, &records)?,
                files::FEATURES => write_feature_csv(&mut buf, &self.raw)?,
                files::NORM => buf = pretty_json(&self.norm).into_bytes(),
                files::NEIGHBORS => self.neighbors.write_csv(&mut buf)?,
                _ => buf = pretty_json(&summary).into_bytes(),
            }
            std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
            out.push(path);
        }
        Ok(out)
    }

    pub fn load(dir: &Path) -> Result<(Self, PrepareSummary)> {
        let open = |name: &str| -> Result<std::fs::File> {
            let path = dir.join(name);
            std::fs::File::open(&path).map_err(|e| Error::io(&path, e))
        };
        let read_json = |name: &str| -> Result<String> {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
        };
        let parse_err = |name: &str, e: serde_json::Error| Error::Parse {
            line: e.line() as u64,
            message: format!("{name}: {e}"),
        };
        let summary: PrepareSummary =
            serde_json::from_str(&read_json(files::SUMMARY)?).map_err(|e| parse_err(files::SUMMARY, e))?;
        let norm: NormStats = serde_json::from_str(&read_json(files::NORM)?).map_err(|e| parse_err(files::NORM, e))?;
        let records = read_segment_manifest(open(files::SEGMENTS)?)?;
        let raw = read_feature_csv(open(files::FEATURES)?)?;
        if raw.len() != records.len() || raw.iter().enumerate().any(|(i, f)| f.segment_index != i) {
            return Err(Error::Schema(format!(
                "{} lists {} segments but {} has {} rows in segment order",
                files::SEGMENTS,
                records.len(),
                files::FEATURES,
                raw.len()
            )));
        }
        if raw.iter().any(|f| f.dim() != norm.dim()) {
            return Err(Error::Schema(format!("feature width does not match {}", files::NORM)));
        }
        let neighbors = NeighborIndex::read_csv(open(files::NEIGHBORS)?, records.len())?;
        let features = apply_normalizer(&norm, &raw)?.into_iter().map(|f| f.values).collect();
        let prepared = Prepared {
            positions: records
                .iter()
                .map(|r| SegmentPosition {
                    stream_id: r.stream_id,
                    index: r.position,
                })
                .collect(),
            labels: records.iter().map(|r| r.label).collect(),
            raw,
            norm,
            features,
            neighbors,
            stats: summary.stats.clone(),
        };
        Ok((prepared, summary))
    }
}

fn pretty_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

pub fn prepare(streams: &[SensorStream], opts: &PrepareOptions) -> Result<Prepared> {
    let mut segments = Vec::new();
    let mut stats = PrepareStats::default();
    for (id, s) in streams.iter().enumerate() {
        let seg = segment(s, id, opts.window_s, opts.step_s)?;
        stats.tied_discarded += seg.tied_discarded;
        stats.streams_too_short += usize::from(seg.too_short);
        segments.extend(seg.segments);
    }
    if segments.is_empty() {
        return Err(Error::EmptyInput("no complete windows in any stream".into()));
    }
    stats.segments = segments.len();
    let raw = extract_all(&segments)?;
    let norm = fit_normalizer(&raw)?;
    let normalized = apply_normalizer(&norm, &raw)?;
    let positions: Vec<SegmentPosition> = segments
        .iter()
        .map(|s| SegmentPosition {
            stream_id: s.stream_id,
            index: s.index,
        })
        .collect();
    let neighbors = NeighborIndex::build(&positions, &normalized, opts.m, opts.n)?;
    Ok(Prepared {
        labels: segments.iter().map(|s| s.label).collect(),
        positions,
        raw,
        norm,
        features: normalized.into_iter().map(|f| f.values).collect(),
        neighbors,
        stats,
    })
}

/// Weak pairs drawn from a random `budget` fraction of labeled segments.
pub fn budget_pairs(labels: &[Option<ClassId>], budget: f64, config: &TrainConfig) -> Result<Vec<WeakPair>> {
    let split = make_budget_split(labels, budget, config.seed)?;
    let labeled = split.labeled(labels)?;
    make_weak_pairs(&labeled, config.pairs_per_epoch, config.positive_ratio, config.seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub stage1: TrainReport,
    pub stage2: Option<TrainReport>,
}

/// Stage 1, then stage 2 when `pairs` is given.
pub fn train(prepared: &Prepared, config: &TrainConfig, pairs: Option<&[WeakPair]>) -> Result<TrainedModel> {
    let (params, stage1) = train_stage1(&prepared.features, &prepared.neighbors, config)?;
    let Some(pairs) = pairs else {
        return Ok(TrainedModel {
            params,
            stage1,
            stage2: None,
        });
    };
    let (params, stage2) = train_stage2(
        params,
        &prepared.features,
        &prepared.neighbors,
        pairs,
        config,
        stage1.final_step,
    )?;
    Ok(TrainedModel {
        params,
        stage1,
        stage2: Some(stage2),
    })
}

/// Embeds all segments, clusters with `k` = number of classes, scores ACC.
pub fn evaluate(
    params: &ModelParams,
    features: &[Vec<f64>],
    labels: &[ClassId],
    seed: u64,
    restarts: usize,
) -> Result<(EvalReport, Vec<f64>)> {
    let emb = embed_all(params, features)?;
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let points = Points::new(&emb, params.embedding_dim())?;
    let assignment = kmeans(points, classes.len(), seed, restarts)?;
    let report = cluster_accuracy(&assignment.labels, classes.len(), labels)?;
    Ok((report, emb))
}
