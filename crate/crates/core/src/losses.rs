//! Reconstruction, consistency and contrastive objectives.
//!
//! Two forms of every term live here: plain functions over slices, which are
//! the reference definitions, and graph builders that evaluate the same
//! quantities for a minibatch on a [`Graph`] so they can be differentiated.
//! Batch objectives are the mean of per-sample (or per-pair) terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Graph, Var};
use crate::model::BoundModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_margin() -> f64 {
    1.0
}

impl LossWeights {
    pub fn stage1_default() -> Self {
        Self {
            alpha: 0.25,
            beta: 0.25,
            gamma: 0.0,
            margin: 1.0,
        }
    }

    pub fn stage2_default() -> Self {
        Self {
            alpha: 0.15,
            beta: 0.15,
            gamma: 0.5,
            margin: 1.0,
        }
    }

    /// Stage 1 ignores `gamma`.
    pub fn validate_stage1(&self) -> Result<()> {
        self.check_common()?;
        if self.alpha + self.beta > 1.0 + 1e-12 {
            return Err(Error::Parameter(format!(
                "stage-1 weights need alpha + beta <= 1, got {} + {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub fn validate_stage2(&self) -> Result<()> {
        self.check_common()?;
        if self.alpha + self.beta + self.gamma > 1.0 + 1e-12 {
            return Err(Error::Parameter(format!(
                "stage-2 weights need alpha + beta + gamma <= 1, got {} + {} + {}",
                self.alpha, self.beta, self.gamma
            )));
        }
        Ok(())
    }

    fn check_common(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Parameter(format!("margin must be > 0, got {}", self.margin)));
        }
        Ok(())
    }

    /// Coefficient of the reconstruction term in stage 1.
    pub fn stage1_recon(&self) -> f64 {
        1.0 - self.alpha - self.beta
    }

    pub fn stage2_recon(&self) -> f64 {
        1.0 - self.alpha - self.beta - self.gamma
    }
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("{what}: dimensions {a} and {b} differ")));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `||x - recon||^2`.
pub fn recon_loss(x: &[f64], recon: &[f64]) -> Result<f64> {
    check_len(x.len(), recon.len(), "reconstruction")?;
    Ok(sq_dist(x, recon))
}

/// Mean squared distance from the reconstruction to each neighbor; 0 for an
/// empty neighbor set.
pub fn neighbor_consistency_loss(neighbors: &[&[f64]], recon: &[f64]) -> Result<f64> {
    if neighbors.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for nb in neighbors {
        check_len(nb.len(), recon.len(), "neighbor")?;
        total += sq_dist(nb, recon);
    }
    Ok(total / neighbors.len() as f64)
}

pub fn temporal_consistency_loss(neighbors: &[&[f64]], recon: &[f64]) -> Result<f64> {
    neighbor_consistency_loss(neighbors, recon)
}

pub fn feature_consistency_loss(neighbors: &[&[f64]], recon: &[f64]) -> Result<f64> {
    neighbor_consistency_loss(neighbors, recon)
}

/// `||e_a - e_b||^2`.
pub fn label_consistency_loss(e_a: &[f64], e_b: &[f64]) -> Result<f64> {
    check_len(e_a.len(), e_b.len(), "embedding")?;
    Ok(sq_dist(e_a, e_b))
}

/// `y * D^2 / 2 + (1 - y) * max(0, margin - D)^2 / 2` with `D = ||e_a - e_b||`.
pub fn contrastive_loss(e_a: &[f64], e_b: &[f64], y: u8, margin: f64) -> Result<f64> {
    check_len(e_a.len(), e_b.len(), "embedding")?;
    if !(margin > 0.0) {
        return Err(Error::Parameter(format!("margin must be > 0, got {margin}")));
    }
    let d = sq_dist(e_a, e_b).sqrt();
    match y {
        1 => Ok(0.5 * d * d),
        0 => {
            let h = (margin - d).max(0.0);
            Ok(0.5 * h * h)
        }
        other => Err(Error::Contract(format!("pair flag must be 0 or 1, got {other}"))),
    }
}

/// Sum of per-pair contrastive losses.
pub fn contrastive_batch_loss(pairs: &[(&[f64], &[f64], u8)], margin: f64) -> Result<f64> {
    pairs
        .iter()
        .map(|(a, b, y)| contrastive_loss(a, b, *y, margin))
        .sum()
}

/// Per-sample stage-1 objective: `(1-a-b) ae + a tc + b fc`.
pub fn stage1_loss(
    x: &[f64],
    recon: &[f64],
    temporal: &[&[f64]],
    feature: &[&[f64]],
    w: &LossWeights,
) -> Result<f64> {
    w.validate_stage1()?;
    let ae = recon_loss(x, recon)?;
    let tc = temporal_consistency_loss(temporal, recon)?;
    let fc = feature_consistency_loss(feature, recon)?;
    Ok(w.stage1_recon() * ae + w.alpha * tc + w.beta * fc)
}

/// One pair member's input, reconstruction and neighbor feature vectors.
#[derive(Debug, Clone, Copy)]
pub struct BranchInputs<'a> {
    pub x: &'a [f64],
    pub recon: &'a [f64],
    pub temporal: &'a [&'a [f64]],
    pub feature: &'a [&'a [f64]],
}

/// Per-pair stage-2 objective; the label term is the contrastive loss.
pub fn stage2_loss(
    a: BranchInputs<'_>,
    b: BranchInputs<'_>,
    e_a: &[f64],
    e_b: &[f64],
    y: u8,
    w: &LossWeights,
) -> Result<f64> {
    w.validate_stage2()?;
    let ae = recon_loss(a.x, a.recon)? + recon_loss(b.x, b.recon)?;
    let tc = temporal_consistency_loss(a.temporal, a.recon)?
        + temporal_consistency_loss(b.temporal, b.recon)?;
    let fc = feature_consistency_loss(a.feature, a.recon)?
        + feature_consistency_loss(b.feature, b.recon)?;
    let lc = contrastive_loss(e_a, e_b, y, w.margin)?;
    Ok(w.stage2_recon() * ae + w.alpha * tc + w.beta * fc + w.gamma * lc)
}

/// Neighbor targets for a minibatch, stored rank by rank.
///
/// `targets[r]` holds the r-th neighbor of every row (zeros where a row has
/// fewer neighbors) and `weights[r]` the matching `1/|set|` or 0.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTargets {
    pub rows: usize,
    pub dim: usize,
    pub targets: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    /// Rows whose neighbor set is empty.
    pub empty_rows: usize,
}

impl NeighborTargets {
    /// Gathers the neighbors of `batch` rows from `features` (row `i` is segment `i`).
    pub fn gather(features: &[Vec<f64>], lists: &[Vec<usize>], batch: &[usize]) -> Self {
        let dim = features.first().map_or(0, Vec::len);
        let ranks = batch.iter().map(|&i| lists[i].len()).max().unwrap_or(0);
        let rows = batch.len();
        let mut targets = vec![vec![0.0; rows * dim]; ranks];
        let mut weights = vec![vec![0.0; rows]; ranks];
        let mut empty_rows = 0;
        for (row, &i) in batch.iter().enumerate() {
            let list = &lists[i];
            if list.is_empty() {
                empty_rows += 1;
                continue;
            }
            let w = 1.0 / list.len() as f64;
            for (r, &j) in list.iter().enumerate() {
                targets[r][row * dim..(row + 1) * dim].copy_from_slice(&features[j]);
                weights[r][row] = w;
            }
        }
        Self {
            rows,
            dim,
            targets,
            weights,
            empty_rows,
        }
    }
}

/// Inputs of one branch of a minibatch: rows of features plus their neighbor sets.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchBatch {
    pub rows: usize,
    pub dim: usize,
    pub x: Vec<f64>,
    pub temporal: NeighborTargets,
    pub feature: NeighborTargets,
}

impl BranchBatch {
    pub fn gather(
        features: &[Vec<f64>],
        temporal: &[Vec<usize>],
        feature: &[Vec<usize>],
        batch: &[usize],
    ) -> Self {
        let dim = features.first().map_or(0, Vec::len);
        let x = batch.iter().flat_map(|&i| features[i].iter().copied()).collect();
        Self {
            rows: batch.len(),
            dim,
            x,
            temporal: NeighborTargets::gather(features, temporal, batch),
            feature: NeighborTargets::gather(features, feature, batch),
        }
    }
}

/// Per-row `rows x 1` columns of each term, as graph nodes.
#[derive(Debug, Clone, Copy)]
struct BranchTerms {
    ae: Option<Var>,
    tc: Option<Var>,
    fc: Option<Var>,
}

/// Batch means of each term and of the total objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermBreakdown {
    pub total: f64,
    pub ae: f64,
    pub tc: f64,
    pub fc: f64,
    pub lc: f64,
}

/// A differentiable objective built on a graph.
#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: Var,
    pub terms: TermBreakdown,
    pub rows: usize,
}

/// How the squared reconstruction and consistency errors reduce over the
/// feature dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// `||x - y||^2`.
    #[default]
    Sum,
    /// `||x - y||^2 / D`, the per-element mean.
    Mean,
}

impl Reduction {
    fn factor(self, dim: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / dim as f64,
        }
    }
}

/// Selects which terms are built. Terms with a zero coefficient are skipped
/// unless `full` is set, which keeps every node (used by gradient checks).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BuildOptions {
    pub full: bool,
    pub reduction: Reduction,
}

fn consistency_column(g: &mut Graph, recon: Var, t: &NeighborTargets) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for (target, weight) in t.targets.iter().zip(&t.weights) {
        let tv = g.constant(t.rows, t.dim, target.clone())?;
        let diff = g.sub(tv, recon)?;
        let sq = g.row_sq_norm(diff);
        let wv = g.constant(t.rows, 1, weight.clone())?;
        let term = g.mul(wv, sq)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc)
}

fn column_mean(g: &Graph, v: Option<Var>, rows: usize) -> f64 {
    v.map_or(0.0, |v| g.value(v).iter().sum::<f64>() / rows as f64)
}

/// Reconstruction plus the consistency terms whose coefficient is non-zero.
fn branch_terms(
    g: &mut Graph,
    model: &BoundModel,
    batch: &BranchBatch,
    coef: [f64; 3],
    opts: BuildOptions,
) -> Result<(Var, BranchTerms)> {
    let x = g.constant(batch.rows, batch.dim, batch.x.clone())?;
    let emb = model.encode(g, x)?;
    let want = |c: f64| opts.full || c != 0.0;
    if !(want(coef[0]) || want(coef[1]) || want(coef[2])) {
        return Ok((
            emb,
            BranchTerms {
                ae: None,
                tc: None,
                fc: None,
            },
        ));
    }
    let recon = model.decode(g, emb)?;
    let ae = if want(coef[0]) {
        let d = g.sub(x, recon)?;
        Some(g.row_sq_norm(d))
    } else {
        None
    };
    let tc = if want(coef[1]) {
        consistency_column(g, recon, &batch.temporal)?
    } else {
        None
    };
    let fc = if want(coef[2]) {
        consistency_column(g, recon, &batch.feature)?
    } else {
        None
    };
    let factor = opts.reduction.factor(batch.dim);
    let mut reduce = |v: Option<Var>| if factor == 1.0 { v } else { v.map(|v| g.scale(v, factor)) };
    let (ae, tc, fc) = (reduce(ae), reduce(tc), reduce(fc));
    Ok((emb, BranchTerms { ae, tc, fc }))
}

fn weighted_sum(g: &mut Graph, parts: &[(Option<Var>, f64)], rows: usize) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, c) in parts {
        let Some(v) = v else { continue };
        let s = g.scale(v, c);
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    let col = match acc {
        Some(a) => a,
        None => g.constant(rows, 1, vec![0.0; rows])?,
    };
    let total = g.sum(col);
    Ok(g.scale(total, 1.0 / rows as f64))
}

/// Minibatch mean of the stage-1 objective.
pub fn stage1_objective(
    g: &mut Graph,
    model: &BoundModel,
    batch: &BranchBatch,
    w: &LossWeights,
    opts: BuildOptions,
) -> Result<Objective> {
    w.validate_stage1()?;
    if batch.rows == 0 {
        return Err(Error::Contract("empty minibatch".into()));
    }
    let coef = [w.stage1_recon(), w.alpha, w.beta];
    let (_, t) = branch_terms(g, model, batch, coef, opts)?;
    let loss = weighted_sum(g, &[(t.ae, coef[0]), (t.tc, coef[1]), (t.fc, coef[2])], batch.rows)?;
    let rows = batch.rows;
    Ok(Objective {
        loss,
        terms: TermBreakdown {
            total: g.scalar(loss)?,
            ae: column_mean(g, t.ae, rows),
            tc: column_mean(g, t.tc, rows),
            fc: column_mean(g, t.fc, rows),
            lc: 0.0,
        },
        rows,
    })
}

/// Contrastive loss per pair as a `rows x 1` column.
pub fn contrastive_column(g: &mut Graph, ea: Var, eb: Var, y: &[u8], margin: f64) -> Result<Var> {
    let rows = y.len();
    if let Some(bad) = y.iter().find(|&&v| v > 1) {
        return Err(Error::Contract(format!("pair flag must be 0 or 1, got {bad}")));
    }
    let diff = g.sub(ea, eb)?;
    let sq = g.row_sq_norm(diff);
    let dist = g.sqrt(sq);
    let hinge = g.hinge(dist, margin);
    let hinge_sq = g.square(hinge);
    let pos = g.constant(rows, 1, y.iter().map(|&v| 0.5 * f64::from(v)).collect())?;
    let neg = g.constant(rows, 1, y.iter().map(|&v| 0.5 * f64::from(1 - v)).collect())?;
    let ls = g.mul(pos, sq)?;
    let ld = g.mul(neg, hinge_sq)?;
    g.add(ls, ld)
}

/// Minibatch mean of the stage-2 objective over pairs `(a[i], b[i], y[i])`.
pub fn stage2_objective(
    g: &mut Graph,
    model: &BoundModel,
    a: &BranchBatch,
    b: &BranchBatch,
    y: &[u8],
    w: &LossWeights,
    opts: BuildOptions,
) -> Result<Objective> {
    w.validate_stage2()?;
    let rows = y.len();
    if rows == 0 || a.rows != rows || b.rows != rows {
        return Err(Error::Contract(format!(
            "pair batch sizes differ: {} / {} / {rows}",
            a.rows, b.rows
        )));
    }
    let coef = [w.stage2_recon(), w.alpha, w.beta];
    let (ea, ta) = branch_terms(g, model, a, coef, opts)?;
    let (eb, tb) = branch_terms(g, model, b, coef, opts)?;
    let mut both = |x: Option<Var>, y: Option<Var>| -> Result<Option<Var>> {
        Ok(match (x, y) {
            (Some(x), Some(y)) => Some(g.add(x, y)?),
            (x, None) => x,
            (None, y) => y,
        })
    };
    let ae = both(ta.ae, tb.ae)?;
    let tc = both(ta.tc, tb.tc)?;
    let fc = both(ta.fc, tb.fc)?;
    let lc = if opts.full || w.gamma != 0.0 {
        Some(contrastive_column(g, ea, eb, y, w.margin)?)
    } else {
        None
    };
    let loss = weighted_sum(
        g,
        &[(ae, coef[0]), (tc, coef[1]), (fc, coef[2]), (lc, w.gamma)],
        rows,
    )?;
    Ok(Objective {
        loss,
        terms: TermBreakdown {
            total: g.scalar(loss)?,
            ae: column_mean(g, ae, rows),
            tc: column_mean(g, tc, rows),
            fc: column_mean(g, fc, rows),
            lc: column_mean(g, lc, rows),
        },
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(alpha: f64, beta: f64, gamma: f64) -> LossWeights {
        LossWeights {
            alpha,
            beta,
            gamma,
            margin: 1.0,
        }
    }

    #[test]
    fn recon_examples() {
        assert_eq!(recon_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(recon_loss(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert!(matches!(recon_loss(&[0.0], &[1.0, 2.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn consistency_examples() {
        let r = [2.0];
        assert_eq!(temporal_consistency_loss(&[&[1.0], &[3.0]], &r).unwrap(), 1.0);
        assert_eq!(temporal_consistency_loss(&[&[2.0]], &r).unwrap(), 0.0);
        assert_eq!(temporal_consistency_loss(&[], &r).unwrap(), 0.0);
        let r = [1.0, 0.0];
        let nb: [&[f64]; 2] = [&[0.0, 0.0], &[2.0, 0.0]];
        assert_eq!(feature_consistency_loss(&nb, &r).unwrap(), 1.0);
        assert_eq!(
            feature_consistency_loss(&nb, &r).unwrap(),
            temporal_consistency_loss(&nb, &r).unwrap()
        );
        let one: [&[f64]; 1] = [&[4.0, -1.0]];
        assert_eq!(
            temporal_consistency_loss(&one, &r).unwrap(),
            recon_loss(&[4.0, -1.0], &r).unwrap()
        );
    }

    #[test]
    fn label_consistency_examples() {
        assert_eq!(label_consistency_loss(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(label_consistency_loss(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert_eq!(label_consistency_loss(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 25.0);
    }

    #[test]
    fn contrastive_examples() {
        assert_eq!(contrastive_loss(&[0.0, 0.0], &[2.0, 0.0], 1, 1.0).unwrap(), 2.0);
        assert_eq!(contrastive_loss(&[0.0], &[0.0], 0, 1.0).unwrap(), 0.5);
        assert_eq!(contrastive_loss(&[0.0], &[1.0], 0, 1.0).unwrap(), 0.0);
        assert_eq!(contrastive_loss(&[0.0], &[3.0], 0, 1.0).unwrap(), 0.0);
        assert!(matches!(contrastive_loss(&[0.0], &[1.0], 2, 1.0), Err(Error::Contract(_))));
        let pairs: [(&[f64], &[f64], u8); 2] = [(&[0.0], &[2.0], 1), (&[0.0], &[0.0], 0)];
        assert_eq!(contrastive_batch_loss(&pairs, 1.0).unwrap(), 2.5);
    }

    #[test]
    fn stage1_weight_collapse_and_arithmetic() {
        let x = [1.0, 0.0];
        let recon = [0.0, 0.0];
        let t: [&[f64]; 1] = [&[2.0, 0.0]];
        let f: [&[f64]; 1] = [&[0.0, 6.0f64.sqrt()]];
        // ae=1, tc=4, fc=6
        assert_eq!(stage1_loss(&x, &recon, &t, &f, &w(0.0, 0.0, 0.0)).unwrap(), 1.0);
        assert_eq!(stage1_loss(&x, &recon, &t, &f, &w(1.0, 0.0, 0.0)).unwrap(), 4.0);
        let x = [2.0f64.sqrt(), 0.0];
        let v = stage1_loss(&x, &recon, &t, &f, &w(0.25, 0.25, 0.0)).unwrap();
        assert!((v - 3.5).abs() < 1e-12);
        assert!(matches!(
            stage1_loss(&x, &recon, &t, &f, &w(0.7, 0.7, 0.0)),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn stage2_arithmetic_and_collapse() {
        // every component equals 1 for each branch; contrastive = 1
        let x = [1.0];
        let recon = [0.0];
        let nb: [&[f64]; 1] = [&[1.0]];
        let br = BranchInputs {
            x: &x,
            recon: &recon,
            temporal: &nb,
            feature: &nb,
        };
        let (ea, eb) = ([0.0], [2.0f64.sqrt()]);
        let v = stage2_loss(br, br, &ea, &eb, 1, &w(0.2, 0.2, 0.4)).unwrap();
        assert!((v - 1.6).abs() < 1e-12);

        let ww = w(0.1, 0.3, 0.0);
        let s2 = stage2_loss(br, br, &ea, &eb, 1, &ww).unwrap();
        let s1 = stage1_loss(&x, &recon, &nb, &nb, &ww).unwrap();
        assert_eq!(s2, 2.0 * s1);

        let pure = stage2_loss(br, br, &ea, &eb, 1, &w(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(pure, contrastive_loss(&ea, &eb, 1, 1.0).unwrap());
        assert!(stage2_loss(br, br, &ea, &eb, 1, &w(0.5, 0.3, 0.4)).is_err());
    }

    #[test]
    fn gather_weights_and_padding() {
        let features = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]];
        let lists = vec![vec![1, 2], vec![0], vec![], vec![2, 1]];
        let t = NeighborTargets::gather(&features, &lists, &[0, 1, 2]);
        assert_eq!(t.targets.len(), 2);
        assert_eq!(t.targets[0], vec![1.0, 0.0, 0.0]);
        assert_eq!(t.weights[0], vec![0.5, 1.0, 0.0]);
        assert_eq!(t.weights[1], vec![0.5, 0.0, 0.0]);
        assert_eq!(t.empty_rows, 1);
    }
}
