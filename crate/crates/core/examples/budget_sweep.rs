//! Clustering accuracy on one synthetic dataset for the vanilla autoencoder,
//! stage 1 only, and stage 2 under 1/5/10% label budgets, averaged over
//! training seeds. Stage 2 runs continue from the seed's stage-1 model.
//!
//! `cargo run --release -p actembed-core --example budget_sweep -- [seeds]`
//!
//! Environment overrides: NOISE SEP OFF RATE DWELL CH NOISECH SUBJ SECS
//! DATASEED WIN STEP HID DIM EPOCHS PATIENCE ALPHA BETA GAMMA.

use std::time::Instant;

use actembed::pipeline::{budget_pairs, evaluate, prepare, PrepareOptions};
use actembed::training::{train_stage1, train_stage2};
use actembed::{LossWeights, SynthConfig, TrainConfig};

fn env(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> actembed::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let synth = SynthConfig {
        seed: env("DATASEED", 0.0) as u64,
        noise: env("NOISE", 2.0),
        separation: env("SEP", 1.0),
        subject_offset: env("OFF", 0.5),
        sample_rate_hz: env("RATE", 20.0),
        mean_dwell_s: env("DWELL", 20.0),
        channels: env("CH", 3.0) as usize,
        noise_channels: env("NOISECH", 3.0) as usize,
        subjects: env("SUBJ", 4.0) as usize,
        seconds_per_subject: env("SECS", 600.0),
        ..SynthConfig::default()
    };
    let streams = actembed::synth::generate(&synth)?;
    let opts = PrepareOptions {
        window_s: env("WIN", 2.0),
        step_s: env("STEP", 1.0),
        ..PrepareOptions::default()
    };
    let prepared = prepare(&streams, &opts)?;
    let labels = prepared.all_labels()?;
    println!("segments {}", prepared.len());

    let names = ["vanilla", "stage1", "1%", "5%", "10%"];
    let mut accs: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    let started = Instant::now();
    for seed in 0..seeds {
        let base = TrainConfig {
            seed,
            hidden: vec![env("HID", 32.0) as usize],
            embedding_dim: env("DIM", 4.0) as usize,
            max_epochs: env("EPOCHS", 60.0) as usize,
            patience: env("PATIENCE", 10.0) as usize,
            stage1: LossWeights {
                alpha: env("ALPHA", 0.45),
                beta: env("BETA", 0.45),
                ..LossWeights::stage1_default()
            },
            stage2: LossWeights {
                gamma: env("GAMMA", 0.5),
                ..LossWeights::stage2_default()
            },
            ..TrainConfig::default()
        };
        let vanilla = TrainConfig {
            stage1: LossWeights {
                alpha: 0.0,
                beta: 0.0,
                ..base.stage1
            },
            ..base.clone()
        };
        let score = |p: &actembed::ModelParams| -> actembed::Result<f64> {
            Ok(evaluate(p, &prepared.features, &labels, seed, base.kmeans_restarts)?.0.acc)
        };
        let mut row = Vec::new();
        let (pv, rv) = train_stage1(&prepared.features, &prepared.neighbors, &vanilla)?;
        row.push((score(&pv)?, rv.stopping_epoch));
        let (p1, r1) = train_stage1(&prepared.features, &prepared.neighbors, &base)?;
        row.push((score(&p1)?, r1.stopping_epoch));
        for budget in [0.01, 0.05, 0.10] {
            let pairs = budget_pairs(&prepared.labels, budget, &base)?;
            let (p2, r2) = train_stage2(
                p1.clone(),
                &prepared.features,
                &prepared.neighbors,
                &pairs,
                &base,
                r1.final_step,
            )?;
            row.push((score(&p2)?, r2.stopping_epoch));
        }
        for (i, (acc, _)) in row.iter().enumerate() {
            accs[i].push(*acc);
        }
        let cells: Vec<String> = row.iter().map(|(a, e)| format!("{a:.4} ({e:>3})")).collect();
        println!("seed {seed}: {}", cells.join("  "));
    }
    for (n, a) in names.iter().zip(&accs) {
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        let sd = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
        println!("{n:>8}: {mean:.4} +- {sd:.4}");
    }
    println!("elapsed {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
