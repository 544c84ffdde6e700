//! Two-stage training: self-supervised stage 1 over all training segments,
//! then weak-pair fine-tuning in stage 2. Minibatch SGD under a staircase
//! learning-rate schedule, early stopping on validation loss.
//!
//! The global step counter runs across both stages. Shuffles are seeded by
//! `(seed, stage, epoch)`, so a run resumed from a saved [`TrainState`]
//! replays exactly the batches and learning rates an uninterrupted run would.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::dataset::WeakPair;
use crate::error::{Error, Result};
use crate::grad::{assign_grads, sgd_step, Graph};
use crate::losses::{
    stage1_objective, stage2_objective, BranchBatch, BuildOptions, LossWeights, Objective,
    TermBreakdown,
};
use crate::model::ModelParams;
use crate::neighbors::NeighborIndex;

const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "stage1")]
    One,
    #[serde(rename = "stage2")]
    Two,
}

impl Stage {
    fn stream(self) -> u64 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Segments held out from gradient updates and used for early stopping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl ValidationSplit {
    /// `round(fraction * n)` validation segments, clamped to `[1, n - 1]`.
    pub fn new(n: usize, fraction: f64, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Parameter(format!("need at least 2 segments, got {n}")));
        }
        let count = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x76616c);
        order.shuffle(&mut rng);
        let mut validation = order[..count].to_vec();
        let mut train = order[count..].to_vec();
        validation.sort_unstable();
        train.sort_unstable();
        Ok(Self { train, validation })
    }

    pub fn is_validation(&self, i: usize) -> bool {
        self.validation.binary_search(&i).is_ok()
    }
}

/// Tracks the best validation loss; stops after `patience` epochs without a
/// strict decrease.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records the validation loss of `epoch` (1-based). Returns
    /// `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|b| loss < b);
        if improved {
            self.best = Some(loss);
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        (improved, self.since_best >= self.patience)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPoint {
    pub step: u64,
    pub lr: f64,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub global_step: u64,
    pub lr: f64,
    pub train: TermBreakdown,
    pub val_loss: f64,
    pub improved: bool,
    /// Rows in this epoch's batches whose temporal neighbor set was empty.
    pub empty_temporal: usize,
    pub empty_feature: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub lr_trace: Vec<LrPoint>,
    pub stopping_epoch: usize,
    pub best_epoch: usize,
    pub final_step: u64,
    pub wall_time_secs: f64,
}

/// Everything needed to continue a stage after an interruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    /// Epochs completed in this stage.
    pub epoch: usize,
    pub global_step: u64,
    pub params: ModelParams,
    pub best_params: ModelParams,
    pub stopping: EarlyStopping,
    pub finished: bool,
    pub report: TrainReport,
}

impl TrainState {
    pub fn new(stage: Stage, params: ModelParams, global_step: u64, patience: usize) -> Self {
        Self {
            stage,
            epoch: 0,
            global_step,
            best_params: params.clone(),
            params,
            stopping: EarlyStopping::new(patience),
            finished: false,
            report: TrainReport {
                final_step: global_step,
                ..Default::default()
            },
        }
    }
}

/// Stratified, epoch-shuffled batches: positives and negatives are each
/// spread evenly over `ceil(len / batch_size)` batches.
pub fn sample_batch(pairs: &[WeakPair], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<WeakPair>> {
    if pairs.is_empty() || batch_size == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7061_6972);
    rng.set_stream(epoch as u64);
    let (mut pos, mut neg): (Vec<WeakPair>, Vec<WeakPair>) = pairs.iter().partition(|p| p.is_positive());
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let batches = pairs.len().div_ceil(batch_size);
    let split = |v: &[WeakPair], j: usize| {
        let lo = j * v.len() / batches;
        let hi = (j + 1) * v.len() / batches;
        v[lo..hi].to_vec()
    };
    (0..batches)
        .map(|j| {
            let mut b = split(&pos, j);
            b.extend(split(&neg, j));
            b.shuffle(&mut rng);
            b
        })
        .collect()
}

/// Normalized feature rows and the frozen neighbor sets over them.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub features: &'a [Vec<f64>],
    pub neighbors: &'a NeighborIndex,
}

impl<'a> TrainData<'a> {
    pub fn new(features: &'a [Vec<f64>], neighbors: &'a NeighborIndex) -> Result<Self> {
        if features.len() != neighbors.len() {
            return Err(Error::Contract(format!(
                "{} feature rows but neighbor index covers {}",
                features.len(),
                neighbors.len()
            )));
        }
        let dim = features.first().map_or(0, Vec::len);
        if dim == 0 || features.iter().any(|f| f.len() != dim) {
            return Err(Error::Contract("feature rows must share a non-zero width".into()));
        }
        Ok(Self { features, neighbors })
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    fn branch(&self, rows: &[usize]) -> BranchBatch {
        BranchBatch::gather(self.features, &self.neighbors.temporal, &self.neighbors.feature, rows)
    }
}

fn check_finite(terms: &TermBreakdown, step: u64) -> Result<()> {
    for (name, v) in [
        ("reconstruction", terms.ae),
        ("temporal_consistency", terms.tc),
        ("feature_consistency", terms.fc),
        ("label_consistency", terms.lc),
        ("total", terms.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: name.into(),
                step,
            });
        }
    }
    Ok(())
}

#[derive(Default)]
struct TermAccumulator {
    sum: TermBreakdown,
    rows: usize,
}

impl TermAccumulator {
    fn add(&mut self, t: &TermBreakdown, rows: usize) {
        let w = rows as f64;
        self.sum.total += w * t.total;
        self.sum.ae += w * t.ae;
        self.sum.tc += w * t.tc;
        self.sum.fc += w * t.fc;
        self.sum.lc += w * t.lc;
        self.rows += rows;
    }

    fn mean(&self) -> TermBreakdown {
        let n = self.rows.max(1) as f64;
        TermBreakdown {
            total: self.sum.total / n,
            ae: self.sum.ae / n,
            tc: self.sum.tc / n,
            fc: self.sum.fc / n,
            lc: self.sum.lc / n,
        }
    }
}

/// Owns the training inputs for one run.
pub struct Trainer<'a> {
    pub data: TrainData<'a>,
    pub config: &'a TrainConfig,
    pub split: ValidationSplit,
}

impl<'a> Trainer<'a> {
    pub fn new(data: TrainData<'a>, config: &'a TrainConfig) -> Result<Self> {
        config.validate()?;
        let split = ValidationSplit::new(data.features.len(), config.validation_fraction, config.seed)?;
        if split.train.len() < config.batch_size {
            return Err(Error::Parameter(format!(
                "{} training segments is fewer than batch_size {}",
                split.train.len(),
                config.batch_size
            )));
        }
        Ok(Self { data, config, split })
    }

    fn opts(&self, full: bool) -> BuildOptions {
        BuildOptions {
            full,
            reduction: self.config.reduction,
        }
    }

    pub fn init_params(&self) -> Result<ModelParams> {
        ModelParams::init(self.config.architecture(self.data.dim()), self.config.seed)
    }

    pub fn start_stage1(&self) -> Result<TrainState> {
        Ok(TrainState::new(Stage::One, self.init_params()?, 0, self.config.patience))
    }

    pub fn start_stage2(&self, params: ModelParams, global_step: u64) -> Result<TrainState> {
        self.check_params(&params)?;
        Ok(TrainState::new(Stage::Two, params, global_step, self.config.patience))
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        params.validate()?;
        if params.input_dim() != self.data.dim() {
            return Err(Error::Contract(format!(
                "model input dim {} does not match feature dim {}",
                params.input_dim(),
                self.data.dim()
            )));
        }
        Ok(())
    }

    /// Splits pairs into those usable for updates (both members in the
    /// training split) and validation pairs (touching a validation segment).
    pub fn split_pairs(&self, pairs: &[WeakPair]) -> Result<(Vec<WeakPair>, Vec<WeakPair>)> {
        let n = self.data.features.len();
        if let Some(p) = pairs.iter().find(|p| p.a >= n || p.b >= n) {
            return Err(Error::Contract(format!(
                "pair ({}, {}) references a segment outside 0..{n}",
                p.a, p.b
            )));
        }
        if let Some(p) = pairs.iter().find(|p| p.y > 1) {
            return Err(Error::Contract(format!("pair flag must be 0 or 1, got {}", p.y)));
        }
        Ok(pairs
            .iter()
            .partition(|p| !self.split.is_validation(p.a) && !self.split.is_validation(p.b)))
    }

    /// Runs epochs until early stopping, `max_epochs`, or `epoch_limit`
    /// epochs in this call. `on_epoch` sees every finished epoch.
    pub fn run(
        &self,
        state: &mut TrainState,
        pairs: Option<&[WeakPair]>,
        epoch_limit: Option<usize>,
        on_epoch: &mut dyn FnMut(&EpochRecord),
    ) -> Result<()> {
        self.check_params(&state.params)?;
        let (train_pairs, val_pairs) = match state.stage {
            Stage::One => (Vec::new(), Vec::new()),
            Stage::Two => {
                let pairs = pairs.ok_or_else(|| Error::Contract("stage 2 needs weak pairs".into()))?;
                let (t, v) = self.split_pairs(pairs)?;
                for polarity in [1u8, 0] {
                    if !t.iter().any(|p| p.y == polarity) {
                        return Err(Error::Constraint(format!(
                            "stage 2 needs at least one {} training pair",
                            if polarity == 1 { "positive" } else { "negative" }
                        )));
                    }
                }
                (t, v)
            }
        };
        let started = Instant::now();
        let mut ran = 0;
        while !state.finished && state.epoch < self.config.max_epochs {
            if epoch_limit.is_some_and(|l| ran >= l) {
                break;
            }
            let record = match state.stage {
                Stage::One => self.stage1_epoch(state)?,
                Stage::Two => self.stage2_epoch(state, &train_pairs, &val_pairs)?,
            };
            let (improved, stop) = state.stopping.observe(record.epoch, record.val_loss);
            if improved {
                state.best_params = state.params.clone();
            }
            let record = EpochRecord { improved, ..record };
            on_epoch(&record);
            state.report.epochs.push(record);
            state.report.stopping_epoch = state.epoch;
            state.report.best_epoch = state.stopping.best_epoch;
            state.report.final_step = state.global_step;
            state.finished = stop;
            ran += 1;
        }
        if state.epoch >= self.config.max_epochs {
            state.finished = true;
        }
        state.report.wall_time_secs += started.elapsed().as_secs_f64();
        Ok(())
    }

    fn step(&self, state: &mut TrainState, build: impl FnOnce(&mut Graph, &ModelParams) -> Result<Objective>) -> Result<Objective> {
        let lr = self.config.lr.at(state.global_step);
        let mut g = Graph::new();
        let obj = build(&mut g, &state.params)?;
        check_finite(&obj.terms, state.global_step)?;
        let grads = g.backward(obj.loss)?;
        assign_grads(state.params.tensors.iter_mut(), grads)?;
        sgd_step(state.params.tensors.iter_mut(), lr)?;
        state.report.lr_trace.push(LrPoint {
            step: state.global_step,
            lr,
        });
        state.global_step += 1;
        Ok(obj)
    }

    /// Segment rows of every stage-1 minibatch in epoch `epoch` (0-based).
    pub fn stage1_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order = self.split.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(Stage::One.stream() << 32));
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Stage-2 minibatches in epoch `epoch`, drawn from the training pairs only.
    pub fn stage2_batches(&self, train_pairs: &[WeakPair], epoch: usize) -> Vec<Vec<WeakPair>> {
        let seed = self.config.seed.wrapping_add(Stage::Two.stream() << 32);
        sample_batch(train_pairs, self.config.batch_size, seed, epoch)
    }

    fn stage1_epoch(&self, state: &mut TrainState) -> Result<EpochRecord> {
        let w = self.config.stage1;
        let mut acc = TermAccumulator::default();
        let (mut empty_t, mut empty_f) = (0, 0);
        for rows in self.stage1_batches(state.epoch) {
            let batch = self.data.branch(&rows);
            empty_t += batch.temporal.empty_rows;
            empty_f += batch.feature.empty_rows;
            let obj = self.step(state, |g, p| {
                let m = p.bind(g);
                stage1_objective(g, &m, &batch, &w, self.opts(false))
            })?;
            acc.add(&obj.terms, obj.rows);
        }
        state.epoch += 1;
        let val_loss = self.stage1_validation(&state.params, &w)?;
        Ok(EpochRecord {
            stage: Stage::One,
            epoch: state.epoch,
            global_step: state.global_step,
            lr: self.config.lr.at(state.global_step),
            train: acc.mean(),
            val_loss,
            improved: false,
            empty_temporal: empty_t,
            empty_feature: empty_f,
        })
    }

    /// Mean stage-1 objective over validation segments.
    pub fn stage1_validation(&self, params: &ModelParams, w: &LossWeights) -> Result<f64> {
        let mut acc = TermAccumulator::default();
        for rows in self.split.validation.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let m = params.bind(&mut g);
            let batch = self.data.branch(rows);
            let obj = stage1_objective(&mut g, &m, &batch, w, self.opts(false))?;
            acc.add(&obj.terms, obj.rows);
        }
        Ok(acc.mean().total)
    }

    fn pair_objective(
        &self,
        g: &mut Graph,
        params: &ModelParams,
        pairs: &[WeakPair],
        w: &LossWeights,
    ) -> Result<Objective> {
        let a: Vec<usize> = pairs.iter().map(|p| p.a).collect();
        let b: Vec<usize> = pairs.iter().map(|p| p.b).collect();
        let y: Vec<u8> = pairs.iter().map(|p| p.y).collect();
        let m = params.bind(g);
        stage2_objective(g, &m, &self.data.branch(&a), &self.data.branch(&b), &y, w, self.opts(false))
    }

    fn stage2_epoch(
        &self,
        state: &mut TrainState,
        train_pairs: &[WeakPair],
        val_pairs: &[WeakPair],
    ) -> Result<EpochRecord> {
        let w = self.config.stage2;
        let mut acc = TermAccumulator::default();
        let (mut empty_t, mut empty_f) = (0, 0);
        for batch in self.stage2_batches(train_pairs, state.epoch) {
            for p in &batch {
                for i in [p.a, p.b] {
                    empty_t += usize::from(self.data.neighbors.temporal[i].is_empty());
                    empty_f += usize::from(self.data.neighbors.feature[i].is_empty());
                }
            }
            let obj = self.step(state, |g, params| self.pair_objective(g, params, &batch, &w))?;
            acc.add(&obj.terms, obj.rows);
        }
        state.epoch += 1;
        let val_loss = self.stage2_validation(&state.params, val_pairs)?;
        Ok(EpochRecord {
            stage: Stage::Two,
            epoch: state.epoch,
            global_step: state.global_step,
            lr: self.config.lr.at(state.global_step),
            train: acc.mean(),
            val_loss,
            improved: false,
            empty_temporal: empty_t,
            empty_feature: empty_f,
        })
    }

    /// Validation loss for stage 2: twice the per-segment unsupervised terms
    /// (one per pair branch) over validation segments, plus `gamma` times the
    /// mean contrastive loss of validation pairs when there are any.
    pub fn stage2_validation(&self, params: &ModelParams, val_pairs: &[WeakPair]) -> Result<f64> {
        let w = self.config.stage2;
        let unsup = LossWeights {
            alpha: w.alpha,
            beta: w.beta,
            gamma: 0.0,
            margin: w.margin,
        };
        // stage1 coefficients are 1 - a - b; rescale the ae part to 1 - a - b - g.
        let mut acc = TermAccumulator::default();
        for rows in self.split.validation.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let m = params.bind(&mut g);
            let batch = self.data.branch(rows);
            let obj = stage1_objective(&mut g, &m, &batch, &unsup, self.opts(true))?;
            acc.add(&obj.terms, obj.rows);
        }
        let t = acc.mean();
        let mut loss = 2.0 * (w.stage2_recon() * t.ae + w.alpha * t.tc + w.beta * t.fc);
        if !val_pairs.is_empty() {
            let mut lc = TermAccumulator::default();
            for chunk in val_pairs.chunks(EVAL_CHUNK) {
                let mut g = Graph::new();
                let only_lc = LossWeights {
                    alpha: 0.0,
                    beta: 0.0,
                    gamma: 1.0,
                    margin: w.margin,
                };
                let obj = self.pair_objective(&mut g, params, chunk, &only_lc)?;
                lc.add(&obj.terms, obj.rows);
            }
            loss += w.gamma * lc.mean().lc;
        }
        Ok(loss)
    }
}

/// Stage 1 from freshly initialized parameters. Returns the best-validation
/// parameters.
pub fn train_stage1(
    features: &[Vec<f64>],
    neighbors: &NeighborIndex,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    let trainer = Trainer::new(TrainData::new(features, neighbors)?, config)?;
    let mut state = trainer.start_stage1()?;
    trainer.run(&mut state, None, None, &mut |_| {})?;
    Ok((state.best_params, state.report))
}

/// Stage 2 from stage-1 parameters; `start_step` continues the global step
/// count (the stage-1 report's `final_step`).
pub fn train_stage2(
    params: ModelParams,
    features: &[Vec<f64>],
    neighbors: &NeighborIndex,
    pairs: &[WeakPair],
    config: &TrainConfig,
    start_step: u64,
) -> Result<(ModelParams, TrainReport)> {
    let trainer = Trainer::new(TrainData::new(features, neighbors)?, config)?;
    let mut state = trainer.start_stage2(params, start_step)?;
    trainer.run(&mut state, Some(pairs), None, &mut |_| {})?;
    Ok((state.best_params, state.report))
}

/// Embeds every feature row.
pub fn embed_all(params: &ModelParams, features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(features.len() * params.embedding_dim());
    for chunk in features.chunks(EVAL_CHUNK) {
        let flat: Vec<f64> = chunk.iter().flatten().copied().collect();
        out.extend(params.encode_rows(&flat)?);
    }
    Ok(out)
}
