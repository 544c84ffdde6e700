//! k-means over embeddings and clustering accuracy under the best one-to-one
//! cluster-to-class mapping.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ClassId;
use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 300;

/// Row-major point set.
#[derive(Debug, Clone, Copy)]
pub struct Points<'a> {
    pub data: &'a [f64],
    pub dim: usize,
}

impl<'a> Points<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Contract(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        Ok(Self { data, dim })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    pub labels: Vec<usize>,
    /// `k x dim`, row-major.
    pub centroids: Vec<f64>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.chunks(dim).enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding.
pub fn seed_centroids(points: Points<'_>, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k * points.dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // guard against rounding landing on a zero-weight tail
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points.row(pick);
        centroids.extend_from_slice(c);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), c));
        }
    }
    centroids
}

/// Lloyd iterations from given centroids. Returns the assignment and the
/// inertia after every iteration.
pub fn lloyd(points: Points<'_>, k: usize, mut centroids: Vec<f64>) -> (ClusterAssignment, Vec<f64>) {
    let (n, dim) = (points.len(), points.dim);
    let mut labels = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let mut changed = false;
        for i in 0..n {
            let (c, d) = nearest(points.row(i), &centroids, dim);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
            dists[i] = d;
        }
        history.push(dists.iter().sum());
        if !changed || iterations == MAX_ITERATIONS {
            break;
        }
        iterations += 1;

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i] * dim..(labels[i] + 1) * dim].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (cen, s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *cen = s * inv;
                }
            }
        }
        // Empty clusters take the point farthest from its current centroid.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                counts[labels[i]] -= 1;
                counts[c] = 1;
                labels[i] = c;
                dists[i] = 0.0;
                centroids[c * dim..(c + 1) * dim].copy_from_slice(points.row(i));
            }
        }
    }
    let inertia = *history.last().unwrap_or(&0.0);
    (
        ClusterAssignment {
            k,
            labels,
            centroids,
            inertia,
            iterations,
        },
        history,
    )
}

/// Best of `restarts` k-means++ / Lloyd runs by inertia (ties: earliest run).
pub fn kmeans(points: Points<'_>, k: usize, seed: u64, restarts: usize) -> Result<ClusterAssignment> {
    if k < 2 || k > points.len() {
        return Err(Error::Parameter(format!(
            "k must be in [2, {}], got {k}",
            points.len()
        )));
    }
    let runs: Vec<ClusterAssignment> = (0..restarts.max(1) as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r);
            let init = seed_centroids(points, k, &mut rng);
            lloyd(points, k, init).0
        })
        .collect();
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.inertia < runs[best].inertia {
            best = i;
        }
    }
    Ok(runs.into_iter().nth(best).expect("at least one restart"))
}

/// Optimal assignment for a square cost matrix (minimization).
///
/// Returns `assignment[row] = col`. O(n^3) shortest augmenting path.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based potentials, column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Row-to-column matching maximizing the matched total of a square count matrix.
pub fn max_matching(counts: &[Vec<u64>]) -> Vec<usize> {
    let top = counts.iter().flatten().copied().max().unwrap_or(0) as f64;
    let cost: Vec<Vec<f64>> = counts
        .iter()
        .map(|r| r.iter().map(|&c| top - c as f64).collect())
        .collect();
    hungarian(&cost)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    /// `k x k`; rows are clusters, columns are classes in `classes` order
    /// followed by zero padding.
    pub confusion: Vec<Vec<u64>>,
    /// Class matched to each cluster; `None` for clusters matched to padding.
    pub mapping: Vec<Option<ClassId>>,
    pub per_class_recall: BTreeMap<ClassId, f64>,
    pub classes: Vec<ClassId>,
    pub evaluated: usize,
}

pub fn confusion_matrix(assignment: &[usize], k: usize, labels: &[ClassId]) -> Result<(Vec<ClassId>, Vec<Vec<u64>>)> {
    if assignment.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} assignments for {} labels",
            assignment.len(),
            labels.len()
        )));
    }
    let mut classes: Vec<ClassId> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() > k {
        return Err(Error::Parameter(format!(
            "{} distinct classes exceed k = {k}",
            classes.len()
        )));
    }
    let mut confusion = vec![vec![0u64; k]; k];
    for (&c, l) in assignment.iter().zip(labels) {
        if c >= k {
            return Err(Error::Contract(format!("cluster id {c} out of range for k = {k}")));
        }
        let col = classes.binary_search(l).expect("class collected above");
        confusion[c][col] += 1;
    }
    Ok((classes, confusion))
}

/// Clustering accuracy: matched fraction under the optimal one-to-one mapping.
pub fn cluster_accuracy(assignment: &[usize], k: usize, labels: &[ClassId]) -> Result<EvalReport> {
    let (classes, confusion) = confusion_matrix(assignment, k, labels)?;
    let matching = max_matching(&confusion);
    let correct: u64 = matching.iter().enumerate().map(|(r, &c)| confusion[r][c]).sum();
    let total = labels.len();
    let mapping: Vec<Option<ClassId>> = matching.iter().map(|&c| classes.get(c).copied()).collect();
    let per_class_recall = classes
        .iter()
        .enumerate()
        .map(|(col, &class)| {
            let support: u64 = confusion.iter().map(|r| r[col]).sum();
            let hit = matching
                .iter()
                .position(|&c| c == col)
                .map_or(0, |row| confusion[row][col]);
            (class, if support > 0 { hit as f64 / support as f64 } else { 0.0 })
        })
        .collect();
    Ok(EvalReport {
        acc: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
        confusion,
        mapping,
        per_class_recall,
        classes,
        evaluated: total,
    })
}

/// Writes `segment_index,e0..e{d-1}[,label]` with shortest round-trip decimals.
pub fn export_embeddings<W: Write>(
    writer: W,
    embeddings: Points<'_>,
    labels: Option<&[ClassId]>,
) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != embeddings.len() {
            return Err(Error::Contract("one label per embedding required".into()));
        }
    }
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Parse {
        line: 0,
        message: e.to_string(),
    };
    let mut header = vec!["segment_index".to_string()];
    header.extend((0..embeddings.dim).map(|d| format!("e{d}")));
    if labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(io)?;
    for i in 0..embeddings.len() {
        let mut row = vec![i.to_string()];
        row.extend(embeddings.row(i).iter().map(|v| format!("{v:?}")));
        if let Some(l) = labels {
            row.push(l[i].to_string());
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("<embeddings>", e))
}

/// Embedding table as read back from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub values: Vec<f64>,
    pub labels: Option<Vec<ClassId>>,
}

pub fn read_embeddings<R: Read>(reader: R) -> Result<EmbeddingTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let has_label = header.iter().last() == Some("label");
    let dim = header.len() - 1 - usize::from(has_label);
    let mut values = Vec::new();
    let mut labels = has_label.then(Vec::new);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |f: &str| Error::Parse {
            line,
            message: format!("`{f}` is not a number"),
        };
        for f in rec.iter().skip(1).take(dim) {
            values.push(f.parse::<f64>().map_err(|_| bad(f))?);
        }
        if let Some(ls) = labels.as_mut() {
            let f = rec.get(dim + 1).unwrap_or("");
            ls.push(f.parse().map_err(|_| bad(f))?);
        }
    }
    Ok(EmbeddingTable { dim, values, labels })
}
