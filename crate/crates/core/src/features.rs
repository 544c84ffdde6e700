//! Per-channel window statistics and dataset-level z-score normalization.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Segment;
use crate::error::{Error, Result};

/// Statistics emitted per channel, in layout order.
pub const STATS: [&str; 7] = ["mean", "var", "std", "median", "max", "min", "iqr"];
pub const STATS_PER_CHANNEL: usize = STATS.len();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub segment_index: usize,
    /// `channels * 7` values; per channel: mean, var, std, median, max, min, iqr.
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * STATS_PER_CHANNEL..(c + 1) * STATS_PER_CHANNEL]
    }
}

/// Quantile by linear interpolation between order statistics of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// The seven window statistics of a single channel.
pub fn channel_stats(samples: &[f64]) -> [f64; STATS_PER_CHANNEL] {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let len = sorted.len();
    if sorted[0] == sorted[len - 1] {
        // sum / n need not round back to the constant
        let c = sorted[0];
        return [c, 0.0, 0.0, c, c, c, 0.0];
    }
    let n = len as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let median = if len % 2 == 1 {
        sorted[len / 2]
    } else {
        0.5 * (sorted[len / 2 - 1] + sorted[len / 2])
    };
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    [
        mean,
        var,
        var.sqrt(),
        median,
        sorted[len - 1],
        sorted[0],
        iqr,
    ]
}

pub fn extract_features(segment_index: usize, segment: &Segment) -> Result<FeatureVector> {
    if segment.samples.is_empty() {
        return Err(Error::Contract(format!("segment {segment_index} has no channels")));
    }
    let mut values = Vec::with_capacity(segment.samples.len() * STATS_PER_CHANNEL);
    for (c, ch) in segment.samples.iter().enumerate() {
        if ch.is_empty() {
            return Err(Error::Contract(format!(
                "segment {segment_index} channel {c} has no samples"
            )));
        }
        if let Some(pos) = ch.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data {
                segment: segment_index,
                channel: c,
                message: format!("non-finite sample at offset {pos}"),
            });
        }
        values.extend_from_slice(&channel_stats(ch));
    }
    Ok(FeatureVector {
        segment_index,
        values,
    })
}

/// Extracts features for every segment; index `i` in the output is segment `i`.
pub fn extract_all(segments: &[Segment]) -> Result<Vec<FeatureVector>> {
    segments
        .par_iter()
        .enumerate()
        .map(|(i, s)| extract_features(i, s))
        .collect()
}

/// Column names matching the feature layout, e.g. `acc_x_mean`.
pub fn feature_names(channel_names: &[String]) -> Vec<String> {
    channel_names
        .iter()
        .flat_map(|c| STATS.iter().map(move |s| format!("{c}_{s}")))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_one(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| if *s > 0.0 { (v - m) / s } else { v - m })
            .collect()
    }
}

pub fn fit_normalizer(features: &[FeatureVector]) -> Result<NormStats> {
    if features.len() < 2 {
        return Err(Error::Parameter(format!(
            "normalizer needs at least 2 vectors, got {}",
            features.len()
        )));
    }
    let dim = features[0].dim();
    if features.iter().any(|f| f.dim() != dim) {
        return Err(Error::Contract("feature vectors differ in length".into()));
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(&f.values) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for f in features {
        for ((s, v), m) in var.iter_mut().zip(&f.values).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
    Ok(NormStats { mean, std })
}

pub fn apply_normalizer(stats: &NormStats, features: &[FeatureVector]) -> Result<Vec<FeatureVector>> {
    features
        .iter()
        .map(|f| {
            if f.dim() != stats.dim() {
                return Err(Error::Contract(format!(
                    "feature dim {} does not match normalizer dim {}",
                    f.dim(),
                    stats.dim()
                )));
            }
            Ok(FeatureVector {
                segment_index: f.segment_index,
                values: stats.apply_one(&f.values),
            })
        })
        .collect()
}

/// Writes `segment_index,f0..f{D-1}` with shortest round-trip decimals.
pub fn write_feature_csv<W: Write>(writer: W, features: &[FeatureVector]) -> Result<()> {
    let dim = features.first().map_or(0, FeatureVector::dim);
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["segment_index".to_string()];
    header.extend((0..dim).map(|d| format!("f{d}")));
    w.write_record(&header).map_err(csv_err)?;
    for f in features {
        let mut row = vec![f.segment_index.to_string()];
        row.extend(f.values.iter().map(|v| format!("{v:?}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<features>", e))
}

pub fn read_feature_csv<R: Read>(reader: R) -> Result<Vec<FeatureVector>> {
    let rows = crate::io::read_indexed_matrix(reader)?;
    Ok(rows
        .into_iter()
        .map(|(segment_index, values)| FeatureVector {
            segment_index,
            values,
        })
        .collect())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse {
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    }
}
