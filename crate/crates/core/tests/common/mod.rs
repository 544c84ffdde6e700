//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use actembed::grad::Graph;
use actembed::losses::{stage1_objective, stage2_objective, BranchBatch, BuildOptions, LossWeights, Reduction};
use actembed::model::ModelParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Window count by walking every start offset.
pub fn enumerate_windows(n: usize, w: usize, s: usize) -> usize {
    let mut count = 0;
    let mut start = 0;
    while w > 0 && s > 0 && start + w <= n {
        count += 1;
        start += s;
    }
    count
}

/// Full sort of all distances; ties broken by index.
pub fn brute_knn(points: &[Vec<f64>], n: usize) -> Vec<Vec<usize>> {
    (0..points.len())
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..points.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let s: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum();
                    (s, j)
                })
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().take(n).map(|(_, j)| j).collect()
        })
        .collect()
}

/// All permutations of `0..k` (Heap's algorithm).
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..k - 1 {
            heap(k - 1, a, out);
            if k % 2 == 0 {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
        }
        heap(k - 1, a, out);
    }
    let mut out = Vec::new();
    heap(k, &mut (0..k).collect(), &mut out);
    out
}

/// Best matched total over every cluster-to-column permutation.
pub fn brute_best_total(counts: &[Vec<u64>]) -> u64 {
    let k = counts.len();
    permutations(k)
        .iter()
        .map(|p| (0..k).map(|r| counts[r][p[r]]).sum::<u64>())
        .max()
        .unwrap_or(0)
}

/// ACC by exhaustive search over cluster-to-class mappings.
pub fn brute_acc(assignment: &[usize], labels: &[i64], k: usize) -> f64 {
    let mut classes: Vec<i64> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut counts = vec![vec![0u64; k]; k];
    for (&c, l) in assignment.iter().zip(labels) {
        let col = classes.binary_search(l).unwrap();
        counts[c][col] += 1;
    }
    brute_best_total(&counts) as f64 / labels.len() as f64
}

/// Freshly initialized parameters with every bias moved off zero. Zero biases
/// put pre-activations of dead ReLU units exactly on the kink, where a
/// central difference measures 1/2 rather than the declared subgradient.
pub fn jittered(arch: actembed::model::Architecture, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(arch, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for (slot, t) in p.tensors.iter_mut().enumerate() {
        if slot % 2 == 1 {
            t.data.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
    }
    p
}

pub fn random_rows(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect()).collect()
}

/// Random neighbor lists; row 0 has an empty set.
pub fn random_lists(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            if i == 0 {
                Vec::new()
            } else {
                (0..k).map(|_| (i + rng.random_range(1..n)) % n).collect()
            }
        })
        .collect()
}

/// Max relative error between analytic and central-difference gradients.
pub fn max_rel_error(
    params: &ModelParams,
    h: f64,
    loss: impl Fn(&ModelParams) -> (f64, Vec<Vec<f64>>),
) -> f64 {
    let (_, analytic) = loss(params);
    let mut worst: f64 = 0.0;
    for (t, slot) in params.tensors.iter().enumerate() {
        for i in 0..slot.data.len() {
            let mut p = params.clone();
            p.tensors[t].data[i] += h;
            let up = loss(&p).0;
            p.tensors[t].data[i] -= 2.0 * h;
            let down = loss(&p).0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[t][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn stage1_grad_error(params: &ModelParams, reduction: Reduction, h: f64) -> f64 {
    let dim = params.input_dim();
    let feats = random_rows(6, dim, 1);
    let t = random_lists(6, 2, 2);
    let f = random_lists(6, 3, 3);
    let batch = BranchBatch::gather(&feats, &t, &f, &[0, 2, 3, 5]);
    let w = LossWeights {
        alpha: 0.3,
        beta: 0.2,
        gamma: 0.0,
        margin: 1.0,
    };
    let opts = BuildOptions { full: true, reduction };
    max_rel_error(params, h, |p| {
        let mut g = Graph::new();
        let m = p.bind(&mut g);
        let obj = stage1_objective(&mut g, &m, &batch, &w, opts).unwrap();
        (g.scalar(obj.loss).unwrap(), g.backward(obj.loss).unwrap().params)
    })
}

pub fn stage2_grad_error(params: &ModelParams, reduction: Reduction, h: f64) -> f64 {
    let dim = params.input_dim();
    let feats = random_rows(8, dim, 4);
    let t = random_lists(8, 2, 5);
    let f = random_lists(8, 2, 6);
    let a = BranchBatch::gather(&feats, &t, &f, &[0, 1, 2, 3]);
    let b = BranchBatch::gather(&feats, &t, &f, &[4, 5, 6, 7]);
    let y = [1, 0, 1, 0];
    // a wide margin keeps every negative pair inside the hinge, away from the kink
    let w = LossWeights {
        alpha: 0.15,
        beta: 0.15,
        gamma: 0.5,
        margin: 50.0,
    };
    let opts = BuildOptions { full: true, reduction };
    max_rel_error(params, h, |p| {
        let mut g = Graph::new();
        let m = p.bind(&mut g);
        let obj = stage2_objective(&mut g, &m, &a, &b, &y, &w, opts).unwrap();
        (g.scalar(obj.loss).unwrap(), g.backward(obj.loss).unwrap().params)
    })
}

/// Small prepared synthetic dataset with well separated classes.
pub fn small_prepared(classes: usize, seed: u64) -> actembed::Prepared {
    let synth = actembed::SynthConfig {
        classes,
        channels: 2,
        noise_channels: 1,
        subjects: 2,
        seconds_per_subject: 80.0,
        sample_rate_hz: 10.0,
        mean_dwell_s: 8.0,
        separation: 2.0,
        noise: 0.5,
        seed,
        ..Default::default()
    };
    let streams = actembed::synth::generate(&synth).unwrap();
    actembed::prepare(&streams, &actembed::PrepareOptions::default()).unwrap()
}

/// Training config sized for `small_prepared`.
pub fn small_config(seed: u64) -> actembed::TrainConfig {
    actembed::TrainConfig {
        seed,
        batch_size: 16,
        max_epochs: 12,
        patience: 4,
        hidden: vec![8],
        embedding_dim: 2,
        pairs_per_epoch: 200,
        kmeans_restarts: 3,
        ..Default::default()
    }
}
