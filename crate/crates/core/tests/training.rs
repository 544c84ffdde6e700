//! Trainer behavior on small synthetic runs.

mod common;

use actembed::pipeline::budget_pairs;
use actembed::training::{embed_all, TrainData, TrainReport, TrainState, Trainer};
use actembed::{train_stage1, train_stage2, LossWeights, TrainConfig};

fn same_run(a: &TrainReport, b: &TrainReport) {
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.lr_trace, b.lr_trace);
    assert_eq!(a.stopping_epoch, b.stopping_epoch);
    assert_eq!(a.best_epoch, b.best_epoch);
    assert_eq!(a.final_step, b.final_step);
}

#[test]
fn no_validation_segment_reaches_an_update() {
    let p = common::small_prepared(3, 1);
    let cfg = common::small_config(4);
    // TrainData holds features and neighbor lists only; stage 2 sees (a, b, y)
    let trainer = Trainer::new(TrainData::new(&p.features, &p.neighbors).unwrap(), &cfg).unwrap();
    let mut train = trainer.split.train.clone();
    train.sort_unstable();
    for epoch in 0..3 {
        let mut rows: Vec<usize> = trainer.stage1_batches(epoch).concat();
        assert!(rows.iter().all(|&i| !trainer.split.is_validation(i)));
        rows.sort_unstable();
        assert_eq!(rows, train);
    }
    let pairs = budget_pairs(&p.labels, 0.5, &cfg).unwrap();
    let (t, v) = trainer.split_pairs(&pairs).unwrap();
    assert_eq!(t.len() + v.len(), pairs.len());
    assert!(v.iter().all(|q| trainer.split.is_validation(q.a) || trainer.split.is_validation(q.b)));
    for epoch in 0..3 {
        for q in trainer.stage2_batches(&t, epoch).concat() {
            assert!(!trainer.split.is_validation(q.a) && !trainer.split.is_validation(q.b));
        }
    }
}

#[test]
fn resumed_training_replays_the_uninterrupted_run() {
    let p = common::small_prepared(3, 2);
    let cfg = TrainConfig {
        patience: 50,
        max_epochs: 6,
        ..common::small_config(5)
    };
    let data = TrainData::new(&p.features, &p.neighbors).unwrap();
    let trainer = Trainer::new(data, &cfg).unwrap();
    let pairs = budget_pairs(&p.labels, 0.2, &cfg).unwrap();

    let mut full1 = trainer.start_stage1().unwrap();
    trainer.run(&mut full1, None, None, &mut |_| {}).unwrap();
    let mut full2 = trainer.start_stage2(full1.best_params.clone(), full1.global_step).unwrap();
    trainer.run(&mut full2, Some(&pairs), None, &mut |_| {}).unwrap();

    // interrupt each stage after a few epochs and go through JSON
    let reload = |s: &TrainState| -> TrainState { serde_json::from_str(&serde_json::to_string(s).unwrap()).unwrap() };
    let mut part1 = trainer.start_stage1().unwrap();
    trainer.run(&mut part1, None, Some(2), &mut |_| {}).unwrap();
    assert!(!part1.finished);
    let mut part1 = reload(&part1);
    trainer.run(&mut part1, None, None, &mut |_| {}).unwrap();
    same_run(&full1.report, &part1.report);
    assert_eq!(full1.best_params, part1.best_params);

    let mut part2 = trainer.start_stage2(part1.best_params.clone(), part1.global_step).unwrap();
    trainer.run(&mut part2, Some(&pairs), Some(3), &mut |_| {}).unwrap();
    let mut part2 = reload(&part2);
    trainer.run(&mut part2, Some(&pairs), None, &mut |_| {}).unwrap();
    same_run(&full2.report, &part2.report);
    assert_eq!(full2.params, part2.params);
    assert_eq!(full2.report.lr_trace[0].step, full1.global_step);
    for pt in full1.report.lr_trace.iter().chain(&full2.report.lr_trace) {
        assert_eq!(pt.lr, actembed::lr_schedule(pt.step));
    }
}

#[test]
fn plain_reconstruction_training_lowers_validation_error() {
    let p = common::small_prepared(3, 3);
    let cfg = TrainConfig {
        stage1: LossWeights {
            alpha: 0.0,
            beta: 0.0,
            ..LossWeights::stage1_default()
        },
        ..common::small_config(6)
    };
    let trainer = Trainer::new(TrainData::new(&p.features, &p.neighbors).unwrap(), &cfg).unwrap();
    let init = trainer.init_params().unwrap();
    let (trained, report) = train_stage1(&p.features, &p.neighbors, &cfg).unwrap();
    let before = trainer.stage1_validation(&init, &cfg.stage1).unwrap();
    let after = trainer.stage1_validation(&trained, &cfg.stage1).unwrap();
    assert!(after < 0.8 * before, "{before} -> {after}");
    let best = &report.epochs[report.best_epoch - 1];
    assert_eq!(best.val_loss, after);
}

#[test]
fn weak_pairs_pull_same_activity_together() {
    let p = common::small_prepared(2, 4);
    let labels = p.all_labels().unwrap();
    let cfg = TrainConfig {
        max_epochs: 30,
        patience: 30,
        ..common::small_config(7)
    };
    let pairs = budget_pairs(&p.labels, 0.3, &cfg).unwrap();
    let (p1, r1) = train_stage1(&p.features, &p.neighbors, &cfg).unwrap();
    let (p2, _) = train_stage2(p1, &p.features, &p.neighbors, &pairs, &cfg, r1.final_step).unwrap();
    let emb = embed_all(&p2, &p.features).unwrap();
    let d = p2.embedding_dim();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let dist: f64 = (0..d).map(|c| (emb[i * d + c] - emb[j * d + c]).powi(2)).sum::<f64>().sqrt();
            if labels[i] == labels[j] { pos.push(dist) } else { neg.push(dist) }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&pos) < 0.5 * mean(&neg), "{} vs {}", mean(&pos), mean(&neg));
}

#[test]
fn identical_seeds_give_identical_runs() {
    let p = common::small_prepared(3, 5);
    let cfg = common::small_config(8);
    let (a, ra) = train_stage1(&p.features, &p.neighbors, &cfg).unwrap();
    let (b, rb) = train_stage1(&p.features, &p.neighbors, &cfg).unwrap();
    assert_eq!(a, b);
    same_run(&ra, &rb);
    let other = TrainConfig { seed: 9, ..cfg };
    let (c, _) = train_stage1(&p.features, &p.neighbors, &other).unwrap();
    assert_ne!(a, c);
}
