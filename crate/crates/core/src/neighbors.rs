//! Temporal and feature-space neighbor sets, computed once on input features.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureVector;

/// Where a segment sits in its source recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentPosition {
    pub stream_id: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborIndex {
    pub temporal: Vec<Vec<usize>>,
    pub feature: Vec<Vec<usize>>,
}

impl NeighborIndex {
    pub fn build(
        positions: &[SegmentPosition],
        features: &[FeatureVector],
        m: usize,
        n: usize,
    ) -> Result<Self> {
        if positions.len() != features.len() {
            return Err(Error::Contract(format!(
                "{} positions for {} feature vectors",
                positions.len(),
                features.len()
            )));
        }
        Ok(Self {
            temporal: temporal_neighbors(positions, m)?,
            feature: feature_neighbors(features, n)?,
        })
    }

    pub fn len(&self) -> usize {
        self.temporal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.temporal.is_empty()
    }

    /// Audit dump: `i,kind,rank,j` rows, temporal before feature per segment.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| Error::Parse {
            line: 0,
            message: e.to_string(),
        };
        w.write_record(["i", "kind", "rank", "j"]).map_err(err)?;
        for i in 0..self.len() {
            for (kind, list) in [("temporal", &self.temporal[i]), ("feature", &self.feature[i])] {
                for (rank, j) in list.iter().enumerate() {
                    w.write_record([i.to_string(), kind.to_string(), rank.to_string(), j.to_string()])
                        .map_err(err)?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<neighbors>", e))
    }

    /// Reads a dump written by [`NeighborIndex::write_csv`] for `len` segments.
    pub fn read_csv<R: Read>(reader: R, len: usize) -> Result<Self> {
        let mut out = Self {
            temporal: vec![Vec::new(); len],
            feature: vec![Vec::new(); len],
        };
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |m: String| Error::Parse { line, message: m };
            let num = |k: usize| -> Result<usize> {
                rec.get(k)
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| bad(format!("column {k} must be a non-negative integer")))
            };
            let (i, rank, j) = (num(0)?, num(2)?, num(3)?);
            if i >= len || j >= len {
                return Err(bad(format!("segment index out of range 0..{len}")));
            }
            let list = match rec.get(1) {
                Some("temporal") => &mut out.temporal[i],
                Some("feature") => &mut out.feature[i],
                other => return Err(bad(format!("unknown neighbor kind {other:?}"))),
            };
            if rank != list.len() {
                return Err(bad(format!("rank {rank} out of order for segment {i}")));
            }
            list.push(j);
        }
        Ok(out)
    }
}

/// Up to `m` segments nearest in window ordinal within the same stream.
///
/// Earlier segments win distance ties, so an interior segment with `m = 2`
/// gets one neighbor on each side.
pub fn temporal_neighbors(positions: &[SegmentPosition], m: usize) -> Result<Vec<Vec<usize>>> {
    if m == 0 {
        return Err(Error::Parameter("temporal neighbor count m must be >= 1".into()));
    }
    let mut out = vec![Vec::new(); positions.len()];
    let mut start = 0;
    while start < positions.len() {
        let stream = positions[start].stream_id;
        let mut end = start + 1;
        while end < positions.len() && positions[end].stream_id == stream {
            if positions[end].index <= positions[end - 1].index {
                return Err(Error::Contract(format!(
                    "segment {end}: positions must increase within stream {stream}"
                )));
            }
            end += 1;
        }
        for i in start..end {
            let pos = positions[i].index;
            let (mut left, mut right) = (i, i + 1);
            let list = &mut out[i];
            while list.len() < m && (left > start || right < end) {
                let dl = (left > start).then(|| pos - positions[left - 1].index);
                let dr = (right < end).then(|| positions[right].index - pos);
                match (dl, dr) {
                    (Some(l), Some(r)) if l <= r => {
                        left -= 1;
                        list.push(left);
                    }
                    (Some(_), None) => {
                        left -= 1;
                        list.push(left);
                    }
                    _ => {
                        list.push(right);
                        right += 1;
                    }
                }
            }
        }
        start = end;
    }
    Ok(out)
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact brute-force kNN (Euclidean) excluding self; ties go to the lower index.
pub fn feature_neighbors(features: &[FeatureVector], n: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Parameter("feature neighbor count n must be >= 1".into()));
    }
    if n >= features.len() {
        return Err(Error::Parameter(format!(
            "feature neighbor count n={n} must be below dataset size {}",
            features.len()
        )));
    }
    Ok(features
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let mut best: Vec<(f64, usize)> = Vec::with_capacity(n + 1);
            for (j, p) in features.iter().enumerate() {
                if j == i {
                    continue;
                }
                let d = squared_distance(&q.values, &p.values);
                if best.len() == n && d >= best[n - 1].0 {
                    continue;
                }
                // j increases monotonically, so inserting after equal distances
                // keeps lower indices first.
                let at = best.partition_point(|&(bd, _)| bd <= d);
                best.insert(at, (d, j));
                best.truncate(n);
            }
            best.into_iter().map(|(_, j)| j).collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pos(stream: usize, idx: &[usize]) -> Vec<SegmentPosition> {
        idx.iter()
            .map(|&index| SegmentPosition {
                stream_id: stream,
                index,
            })
            .collect()
    }

    fn points(vals: &[f64]) -> Vec<FeatureVector> {
        vals.iter()
            .enumerate()
            .map(|(i, &v)| FeatureVector {
                segment_index: i,
                values: vec![v],
            })
            .collect()
    }

    #[test]
    fn symmetric_interior_and_boundary() {
        let t = temporal_neighbors(&pos(0, &[0, 1, 2, 3, 4]), 2).unwrap();
        assert_eq!(t[2], vec![1, 3]);
        assert_eq!(t[0], vec![1, 2]);
        assert_eq!(t[4], vec![3, 2]);
    }

    #[test]
    fn single_segment_stream_has_no_temporal_neighbors() {
        let mut p = pos(0, &[0, 1, 2]);
        p.extend(pos(1, &[0]));
        let t = temporal_neighbors(&p, 3).unwrap();
        assert!(t[3].is_empty());
        assert_eq!(t[0], vec![1, 2]);
    }

    #[test]
    fn gaps_in_positions_measure_real_distance() {
        // ordinal 2 was discarded (tied label)
        let t = temporal_neighbors(&pos(0, &[0, 1, 3, 4]), 1).unwrap();
        assert_eq!(t[1], vec![0]);
        assert_eq!(t[2], vec![3]);
    }

    #[test]
    fn line_points_nearest() {
        let f = feature_neighbors(&points(&[0.0, 1.0, 10.0]), 1).unwrap();
        assert_eq!(f, vec![vec![1], vec![0], vec![1]]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        // 0 is equidistant from 1 and 2; 1 and 2 coincide.
        let f = feature_neighbors(&points(&[0.0, 1.0, 1.0, -1.0]), 1).unwrap();
        assert_eq!(f[0], vec![1]);
        assert_eq!(f[2], vec![1]);
        assert_eq!(f[1], vec![2]);
    }

    #[test]
    fn n_too_large_is_parameter_error() {
        assert!(matches!(
            feature_neighbors(&points(&[0.0, 1.0]), 2),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn dump_lists_both_kinds() {
        let idx = NeighborIndex::build(&pos(0, &[0, 1, 2]), &points(&[0.0, 1.0, 3.0]), 1, 1).unwrap();
        let mut buf = Vec::new();
        idx.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("i,kind,rank,j\n0,temporal,0,1\n0,feature,0,1\n"));
        assert_eq!(text.lines().count(), 7);
        assert_eq!(NeighborIndex::read_csv(text.as_bytes(), 3).unwrap(), idx);
        assert!(NeighborIndex::read_csv(text.as_bytes(), 2).is_err());
    }
}
