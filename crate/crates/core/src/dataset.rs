//! Sensor stream ingestion, sliding-window segmentation, label-budget splits
//! and weak pair generation.
//!
//! Everything here is a pure function of its inputs and an explicit seed.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = i64;

/// Column mapping for a CSV sensor file.
///
/// Column references are header names, or zero-based positions when
/// `has_header` is false (useful for whitespace-delimited archive dumps).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub sample_rate_hz: f64,
    pub index_column: String,
    pub channels: Vec<String>,
    #[serde(default)]
    pub label_column: Option<String>,
    #[serde(default)]
    pub subject_id: Option<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    #[serde(default = "default_true")]
    pub has_header: bool,
    /// Rows carrying one of these raw labels are dropped (e.g. transient activity).
    #[serde(default)]
    pub drop_labels: Vec<ClassId>,
    /// Raw label -> class id merge table (e.g. folding transitions into one class).
    #[serde(default)]
    pub label_merge: BTreeMap<String, ClassId>,
}

fn default_delimiter() -> String {
    ",".to_string()
}

fn default_true() -> bool {
    true
}

impl Schema {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let schema: Schema = toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema is always representable as TOML")
    }

    fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(Error::Schema(format!(
                "sample_rate_hz must be positive, got {}",
                self.sample_rate_hz
            )));
        }
        if self.channels.is_empty() {
            return Err(Error::Schema("at least one channel column is required".into()));
        }
        if self.delimiter_byte().is_none() {
            return Err(Error::Schema(format!(
                "delimiter must be a single byte or \"whitespace\", got {:?}",
                self.delimiter
            )));
        }
        for key in self.label_merge.keys() {
            key.trim().parse::<ClassId>().map_err(|_| {
                Error::Schema(format!("label_merge key `{key}` is not an integer label"))
            })?;
        }
        Ok(())
    }

    fn delimiter_byte(&self) -> Option<u8> {
        match self.delimiter.as_str() {
            "whitespace" | " " => Some(b' '),
            "\\t" | "\t" => Some(b'\t'),
            d if d.len() == 1 => Some(d.as_bytes()[0]),
            _ => None,
        }
    }

    fn merged_label(&self, raw: ClassId) -> ClassId {
        self.label_merge
            .iter()
            .find(|(k, _)| k.trim().parse::<ClassId>().ok() == Some(raw))
            .map(|(_, v)| *v)
            .unwrap_or(raw)
    }
}

/// Multi-channel sensor recording with optional per-sample labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorStream {
    pub channel_names: Vec<String>,
    /// One series per channel, all of equal length.
    pub channels: Vec<Vec<f64>>,
    pub sample_rate_hz: f64,
    pub labels: Option<Vec<ClassId>>,
    pub subject_id: Option<String>,
}

impl SensorStream {
    pub fn new(
        channel_names: Vec<String>,
        channels: Vec<Vec<f64>>,
        sample_rate_hz: f64,
        labels: Option<Vec<ClassId>>,
    ) -> Result<Self> {
        if channels.is_empty() || channel_names.len() != channels.len() {
            return Err(Error::Contract(
                "stream needs at least one channel and one name per channel".into(),
            ));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Contract("all channels must have equal length".into()));
        }
        if !(sample_rate_hz > 0.0) {
            return Err(Error::Parameter(format!(
                "sample_rate_hz must be positive, got {sample_rate_hz}"
            )));
        }
        if let Some(l) = &labels {
            if l.len() != len {
                return Err(Error::Contract("one label per sample required".into()));
            }
        }
        Ok(Self {
            channel_names,
            channels,
            sample_rate_hz,
            labels,
            subject_id: None,
        })
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub rows_read: usize,
    /// Rows with at least one missing channel value.
    pub dropped_missing: usize,
    /// Rows whose label is listed in `drop_labels`.
    pub dropped_label: usize,
}

pub fn load_stream(path: impl AsRef<Path>, schema: &Schema) -> Result<(SensorStream, LoadStats)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let (mut stream, stats) = read_stream(file, schema)?;
    if stream.subject_id.is_none() {
        stream.subject_id = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    }
    Ok((stream, stats))
}

fn is_missing(field: &str) -> bool {
    let f = field.trim();
    f.is_empty() || f.eq_ignore_ascii_case("nan") || f.eq_ignore_ascii_case("na")
}

/// Parses CSV rows into a stream according to `schema`.
pub fn read_stream<R: Read>(reader: R, schema: &Schema) -> Result<(SensorStream, LoadStats)> {
    schema.validate()?;
    let delimiter = schema.delimiter_byte().expect("validated");
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(schema.has_header)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(reader);

    let header: Option<Vec<String>> = if schema.has_header {
        let h = rdr.headers().map_err(csv_error)?;
        Some(h.iter().map(str::to_string).collect())
    } else {
        None
    };
    let resolve = |name: &str, width: Option<usize>| -> Result<usize> {
        match &header {
            Some(h) => h
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::MissingColumn { column: name.into() }),
            None => {
                let pos: usize = name.trim().parse().map_err(|_| Error::MissingColumn {
                    column: name.into(),
                })?;
                match width {
                    Some(w) if pos >= w => Err(Error::MissingColumn { column: name.into() }),
                    _ => Ok(pos),
                }
            }
        }
    };

    let mut records = rdr.records().peekable();
    let width = match (&header, records.peek()) {
        (Some(h), _) => Some(h.len()),
        (None, Some(Ok(r))) => Some(r.len()),
        _ => None,
    };
    let index_col = resolve(&schema.index_column, width)?;
    let channel_cols: Vec<usize> = schema
        .channels
        .iter()
        .map(|c| resolve(c, width))
        .collect::<Result<_>>()?;
    let label_col = schema
        .label_column
        .as_deref()
        .map(|c| resolve(c, width))
        .transpose()?;

    let mut stats = LoadStats::default();
    let mut channels = vec![Vec::new(); channel_cols.len()];
    let mut labels = label_col.map(|_| Vec::new());
    let mut row = vec![0.0; channel_cols.len()];

    for record in records {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        stats.rows_read += 1;
        let _ = record.get(index_col);

        let label = match label_col {
            Some(c) => {
                let field = record.get(c).unwrap_or("");
                if is_missing(field) {
                    stats.dropped_missing += 1;
                    continue;
                }
                let raw = parse_label(field).ok_or_else(|| Error::Parse {
                    line,
                    message: format!("label `{field}` is not an integer"),
                })?;
                if schema.drop_labels.contains(&raw) {
                    stats.dropped_label += 1;
                    continue;
                }
                Some(schema.merged_label(raw))
            }
            None => None,
        };

        let mut missing = false;
        for (slot, &c) in row.iter_mut().zip(&channel_cols) {
            let field = record.get(c).unwrap_or("");
            if is_missing(field) {
                missing = true;
                break;
            }
            *slot = field.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("value `{field}` in column {c} is not a number"),
            })?;
            if !slot.is_finite() {
                missing = true;
                break;
            }
        }
        if missing {
            stats.dropped_missing += 1;
            continue;
        }
        for (ch, &v) in channels.iter_mut().zip(&row) {
            ch.push(v);
        }
        if let (Some(ls), Some(l)) = (labels.as_mut(), label) {
            ls.push(l);
        }
    }

    if channels[0].is_empty() {
        return Err(Error::EmptyInput(format!(
            "no usable rows ({} read, {} dropped)",
            stats.rows_read,
            stats.dropped_missing + stats.dropped_label
        )));
    }
    let mut stream = SensorStream::new(
        schema.channels.clone(),
        channels,
        schema.sample_rate_hz,
        labels,
    )?;
    stream.subject_id = schema.subject_id.clone();
    Ok((stream, stats))
}

fn parse_label(field: &str) -> Option<ClassId> {
    field.parse::<ClassId>().ok().or_else(|| {
        let v: f64 = field.parse().ok()?;
        (v.fract() == 0.0 && v.is_finite()).then_some(v as ClassId)
    })
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// One fixed-length window of raw samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// Window ordinal within its stream.
    pub index: usize,
    pub stream_id: usize,
    /// `channels x window_length` samples.
    pub samples: Vec<Vec<f64>>,
    pub label: Option<ClassId>,
}

impl Segment {
    pub fn window_len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Segmentation {
    pub segments: Vec<Segment>,
    /// Windows discarded because their majority label was tied.
    pub tied_discarded: usize,
    /// Set when the stream is shorter than one window.
    pub too_short: bool,
}

/// Converts a duration to a sample count, `round(seconds * rate)`.
pub fn samples_for(seconds: f64, sample_rate_hz: f64) -> usize {
    (seconds * sample_rate_hz).round() as usize
}

/// Number of full windows of `window` samples stepped by `step` over `n` samples.
pub fn window_count(n: usize, window: usize, step: usize) -> usize {
    if window == 0 || step == 0 || n < window {
        0
    } else {
        (n - window) / step + 1
    }
}

/// Slices `stream` into full windows; trailing partial windows are dropped.
pub fn segment(
    stream: &SensorStream,
    stream_id: usize,
    window_seconds: f64,
    step_seconds: f64,
) -> Result<Segmentation> {
    if !(window_seconds > 0.0) || !(step_seconds > 0.0) {
        return Err(Error::Parameter(format!(
            "window and step must be positive, got {window_seconds} s / {step_seconds} s"
        )));
    }
    let window = samples_for(window_seconds, stream.sample_rate_hz);
    let step = samples_for(step_seconds, stream.sample_rate_hz);
    if window == 0 || step == 0 {
        return Err(Error::Parameter(format!(
            "window ({window}) and step ({step}) must cover at least one sample at {} Hz",
            stream.sample_rate_hz
        )));
    }
    let n = stream.len();
    let mut out = Segmentation {
        too_short: n < window,
        ..Default::default()
    };
    for w in 0..window_count(n, window, step) {
        let start = w * step;
        let label = match &stream.labels {
            Some(labels) => match majority(&labels[start..start + window]) {
                Some(l) => Some(l),
                None => {
                    out.tied_discarded += 1;
                    continue;
                }
            },
            None => None,
        };
        out.segments.push(Segment {
            index: w,
            stream_id,
            samples: stream
                .channels
                .iter()
                .map(|c| c[start..start + window].to_vec())
                .collect(),
            label,
        });
    }
    Ok(out)
}

/// Most frequent label, or `None` when the top count is shared.
fn majority(labels: &[ClassId]) -> Option<ClassId> {
    let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let top = counts.values().copied().max()?;
    let mut winners = counts.iter().filter(|(_, &c)| c == top);
    let first = winners.next().map(|(&l, _)| l);
    if winners.next().is_some() {
        None
    } else {
        first
    }
}

/// Which segments keep their label under a given label budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelBudgetSplit {
    pub budget_fraction: f64,
    pub labeled_indices: Vec<usize>,
    pub unlabeled_indices: Vec<usize>,
}

impl LabelBudgetSplit {
    /// `(segment, class)` for the labeled portion only.
    pub fn labeled(&self, labels: &[Option<ClassId>]) -> Result<Vec<(usize, ClassId)>> {
        self.labeled_indices
            .iter()
            .map(|&i| {
                labels
                    .get(i)
                    .copied()
                    .flatten()
                    .map(|l| (i, l))
                    .ok_or_else(|| Error::Contract(format!("segment {i} has no label")))
            })
            .collect()
    }

    /// Labels as seen downstream: unlabeled segments are erased.
    pub fn visible_labels(&self, labels: &[Option<ClassId>]) -> Vec<Option<ClassId>> {
        let mut out = vec![None; labels.len()];
        for &i in &self.labeled_indices {
            out[i] = labels[i];
        }
        out
    }
}

pub fn make_budget_split(
    labels: &[Option<ClassId>],
    fraction: f64,
    seed: u64,
) -> Result<LabelBudgetSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter(format!(
            "budget fraction must be in (0, 1], got {fraction}"
        )));
    }
    if let Some(i) = labels.iter().position(Option::is_none) {
        return Err(Error::Contract(format!(
            "budget split needs labels on every segment; segment {i} has none"
        )));
    }
    let total = labels.len();
    let count = ((fraction * total as f64).round() as usize).min(total);
    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut labeled = order[..count].to_vec();
    let mut unlabeled = order[count..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok(LabelBudgetSplit {
        budget_fraction: fraction,
        labeled_indices: labeled,
        unlabeled_indices: unlabeled,
    })
}

/// Two segment indices and a same-activity flag. Carries no class id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WeakPair {
    pub a: usize,
    pub b: usize,
    /// 1 when both segments share an activity, 0 otherwise.
    pub y: u8,
}

impl WeakPair {
    pub fn is_positive(&self) -> bool {
        self.y == 1
    }
}

/// Above this many candidates pairs are drawn by rejection instead of enumeration.
const ENUMERATION_LIMIT: u64 = 1 << 18;

/// Draws `pairs_per_epoch` weak pairs among labeled segments.
///
/// `round(pairs_per_epoch * positive_ratio)` pairs are positive. Pairs are
/// distinct while enough distinct candidates exist; otherwise every candidate
/// is used and the remainder is drawn with replacement.
pub fn make_weak_pairs(
    labeled: &[(usize, ClassId)],
    pairs_per_epoch: usize,
    positive_ratio: f64,
    seed: u64,
) -> Result<Vec<WeakPair>> {
    if !(0.0..=1.0).contains(&positive_ratio) {
        return Err(Error::Parameter(format!(
            "positive_ratio must be in [0, 1], got {positive_ratio}"
        )));
    }
    if labeled.len() < 2 {
        return Err(Error::Constraint(format!(
            "need at least 2 labeled segments, got {}",
            labeled.len()
        )));
    }
    let mut class_sizes: BTreeMap<ClassId, u64> = BTreeMap::new();
    for &(_, c) in labeled {
        *class_sizes.entry(c).or_default() += 1;
    }
    let l = labeled.len() as u64;
    let possible_pos: u64 = class_sizes.values().map(|&c| c * (c - 1) / 2).sum();
    let possible_neg = l * (l - 1) / 2 - possible_pos;

    let n_pos = (pairs_per_epoch as f64 * positive_ratio).round() as usize;
    let n_neg = pairs_per_epoch - n_pos;
    if n_pos > 0 && possible_pos == 0 {
        return Err(Error::Constraint(
            "no positive pair possible: every labeled segment has a distinct class".into(),
        ));
    }
    if n_neg > 0 && possible_neg == 0 {
        return Err(Error::Constraint(
            "no negative pair possible: all labeled segments share one class".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = draw_polarity(labeled, true, n_pos, possible_pos, &mut rng);
    pairs.extend(draw_polarity(labeled, false, n_neg, possible_neg, &mut rng));
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

fn draw_polarity(
    labeled: &[(usize, ClassId)],
    positive: bool,
    quota: usize,
    possible: u64,
    rng: &mut ChaCha8Rng,
) -> Vec<WeakPair> {
    if quota == 0 {
        return Vec::new();
    }
    let y = u8::from(positive);
    let make = |i: usize, j: usize| {
        let (a, b) = (labeled[i].0.min(labeled[j].0), labeled[i].0.max(labeled[j].0));
        WeakPair { a, b, y }
    };
    if possible <= ENUMERATION_LIMIT || quota as u64 >= possible / 2 {
        let mut all = Vec::with_capacity(possible as usize);
        for i in 0..labeled.len() {
            for j in i + 1..labeled.len() {
                if (labeled[i].1 == labeled[j].1) == positive {
                    all.push(make(i, j));
                }
            }
        }
        all.shuffle(rng);
        if quota <= all.len() {
            all.truncate(quota);
            return all;
        }
        let distinct = all.len();
        for _ in distinct..quota {
            let pick = all[rng.random_range(0..distinct)];
            all.push(pick);
        }
        return all;
    }
    let mut seen = HashSet::with_capacity(quota);
    let mut out = Vec::with_capacity(quota);
    while out.len() < quota {
        let i = rng.random_range(0..labeled.len());
        let j = rng.random_range(0..labeled.len());
        if i == j || (labeled[i].1 == labeled[j].1) != positive {
            continue;
        }
        let p = make(i, j);
        if seen.insert((p.a, p.b)) {
            out.push(p);
        }
    }
    out
}

pub fn write_pairs<W: Write>(writer: W, pairs: &[WeakPair]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["a", "b", "y"]).map_err(csv_error)?;
    for p in pairs {
        w.serialize((p.a, p.b, p.y)).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<pairs>", e))
}

pub fn read_pairs<R: Read>(reader: R) -> Result<Vec<WeakPair>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| -> Result<usize> {
            rec.get(i)
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::Parse {
                    line,
                    message: format!("pair row must be `a,b,y` with non-negative integers"),
                })
        };
        let (a, b, y) = (field(0)?, field(1)?, field(2)?);
        if y > 1 {
            return Err(Error::Parse {
                line,
                message: format!("pair flag must be 0 or 1, got {y}"),
            });
        }
        if a == b {
            return Err(Error::Parse {
                line,
                message: format!("pair references segment {a} twice"),
            });
        }
        out.push(WeakPair { a, b, y: y as u8 });
    }
    Ok(out)
}

/// Writes the segment manifest: `segment,stream,position,label`, in segment order.
pub fn write_segment_manifest<W: Write>(writer: W, segments: &[Segment]) -> Result<()> {
    let records: Vec<SegmentRecord> = segments
        .iter()
        .map(|s| SegmentRecord {
            stream_id: s.stream_id,
            position: s.index,
            label: s.label,
        })
        .collect();
    write_segment_records(writer, &records)
}

/// Same layout as [`write_segment_manifest`], from manifest rows.
pub fn write_segment_records<W: Write>(writer: W, records: &[SegmentRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["segment", "stream", "position", "label"])
        .map_err(csv_error)?;
    for (i, r) in records.iter().enumerate() {
        let label = r.label.map(|l| l.to_string()).unwrap_or_default();
        w.write_record([
            i.to_string(),
            r.stream_id.to_string(),
            r.position.to_string(),
            label,
        ])
        .map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<manifest>", e))
}

/// Row of the segment manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentRecord {
    pub stream_id: usize,
    pub position: usize,
    pub label: Option<ClassId>,
}

pub fn read_segment_manifest<R: Read>(reader: R) -> Result<Vec<SegmentRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |what: &str| Error::Parse {
            line,
            message: format!("bad {what} in segment manifest"),
        };
        let seg: usize = rec.get(0).and_then(|f| f.parse().ok()).ok_or_else(|| bad("segment"))?;
        if seg != out.len() {
            return Err(bad("segment ordering"));
        }
        let stream_id = rec.get(1).and_then(|f| f.parse().ok()).ok_or_else(|| bad("stream"))?;
        let position = rec.get(2).and_then(|f| f.parse().ok()).ok_or_else(|| bad("position"))?;
        let label = match rec.get(3).unwrap_or("") {
            "" => None,
            f => Some(f.parse().map_err(|_| bad("label"))?),
        };
        out.push(SegmentRecord {
            stream_id,
            position,
            label,
        });
    }
    Ok(out)
}
