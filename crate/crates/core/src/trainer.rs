//! The training pipeline: two views, online and target forwards, neighbor
//! mining from the memory bank, optional negative mining, the soft and hard
//! losses, backward, SGD, EMA and enqueue. Also the symmetric InfoNCE
//! baseline and the ablation harness.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{augment_batch, AugmentPolicy, Dataset};
use crate::diagnostics::{knn_probe, purity, PurityReport, DEFAULT_KNN};
use crate::error::{invalid, Error, Result};
use crate::memory_bank::{MemoryBank, MinedNeighborSet, DESK_BANK_CAPACITY};
use crate::network::{
    backward, ema_update, encode, forward_online, forward_target, sgd_step, update_running_stats,
    ArchSpec, BnFlags, BnMode, Branch, LrSchedule, NetworkGrads, NetworkParams, OnlineForward,
};
use crate::numerics::{dot, l2_normalize_rows, EmbeddingMatrix, RngState};
use crate::pnsm::{filter_negative_sets, Fallback, MiningConfig, StreamKey};
use crate::ppsm::{
    apply_weight_strategy, hard_loss, infonce_loss, psm_loss, soft_loss, soft_weights, LossOutput,
    NegativeSets, WeightSpan, WeightStrategy, WeightVector,
};

const TAG_SHUFFLE: u64 = 0x5348;
const TAG_AUGMENT: u64 = 0x4147;
const TAG_HARD: u64 = 0x48;
const TAG_SOFT: u64 = 0x53;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Temperature.
    pub t: f64,
    pub batch_size: usize,
    /// Neighbors mined per query.
    pub k: usize,
    /// Negative-mining density.
    pub a: f64,
    /// Weight of the hard loss.
    pub lambda: f64,
    pub ema_momentum: f64,
    pub bank_capacity: usize,
    pub epochs: usize,
    pub warmup_epochs: f64,
    pub start_lr: f64,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub strategy: WeightStrategy,
    pub weight_span: WeightSpan,
    pub fallback: Fallback,
    pub use_soft: bool,
    pub use_hard: bool,
    pub use_pnsm: bool,
    pub symmetrize: bool,
    /// Train the symmetric InfoNCE baseline instead of the full pipeline.
    pub baseline: bool,
    pub seed: u64,
    /// Run the kNN probe every this many epochs (0: final epoch only).
    pub probe_every: usize,
    pub knn_k: usize,
    pub augment: AugmentPolicy,
    pub encoder_widths: Vec<usize>,
    pub projector_widths: Vec<usize>,
    pub predictor_widths: Vec<usize>,
    pub batch_norm: BnFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let desk = ArchSpec::desk(1);
        Self {
            t: 0.5,
            batch_size: 64,
            k: 5,
            a: 0.5,
            lambda: 1.0,
            ema_momentum: 0.99,
            bank_capacity: DESK_BANK_CAPACITY,
            epochs: 100,
            warmup_epochs: 10.0,
            start_lr: 1e-4,
            peak_lr: 0.1,
            floor_lr: 0.0,
            momentum: 0.9,
            weight_decay: 1e-3,
            strategy: WeightStrategy::V0,
            weight_span: WeightSpan::WithView,
            fallback: Fallback::KeepMostProbable,
            use_soft: true,
            use_hard: true,
            use_pnsm: true,
            symmetrize: false,
            baseline: false,
            seed: 0,
            probe_every: 0,
            knn_k: DEFAULT_KNN,
            augment: AugmentPolicy::default(),
            encoder_widths: desk.encoder,
            projector_widths: desk.projector,
            predictor_widths: desk.predictor,
            batch_norm: desk.batch_norm,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !positive(self.t) {
            return Err(invalid(format!(
                "temperature t must be > 0, got {}",
                self.t
            )));
        }
        if self.batch_size < 2 {
            return Err(invalid("batch size must be at least 2"));
        }
        if !nonneg(self.a) {
            return Err(invalid(format!(
                "mining density a must be >= 0, got {}",
                self.a
            )));
        }
        if !nonneg(self.lambda) {
            return Err(invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        for (name, m) in [
            ("ema momentum", self.ema_momentum),
            ("sgd momentum", self.momentum),
        ] {
            if !(0.0..=1.0).contains(&m) {
                return Err(invalid(format!("{name} must be in [0, 1], got {m}")));
            }
        }
        if self.bank_capacity == 0 {
            return Err(invalid("bank capacity must be positive"));
        }
        if !nonneg(self.warmup_epochs) || !nonneg(self.weight_decay) {
            return Err(invalid("warmup epochs and weight decay must be >= 0"));
        }
        if !nonneg(self.start_lr) || !nonneg(self.peak_lr) || !nonneg(self.floor_lr) {
            return Err(invalid("learning rates must be >= 0"));
        }
        if self.knn_k == 0 {
            return Err(invalid("knn_k must be at least 1"));
        }
        self.augment.validate()?;
        if !self.baseline {
            if !self.use_soft && !self.use_hard {
                return Err(invalid(
                    "at least one of the soft and hard losses must be enabled",
                ));
            }
            if self.k == 0 && !self.use_hard {
                return Err(invalid(
                    "k = 0 without the hard loss leaves no mined positives",
                ));
            }
        }
        Ok(())
    }

    pub fn arch(&self, input_dim: usize) -> ArchSpec {
        ArchSpec {
            input_dim,
            encoder: self.encoder_widths.clone(),
            projector: self.projector_widths.clone(),
            predictor: if self.baseline {
                Vec::new()
            } else {
                self.predictor_widths.clone()
            },
            batch_norm: self.batch_norm,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            start_lr: self.start_lr,
            peak_lr: self.peak_lr,
            floor_lr: self.floor_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs as f64,
        }
    }

    pub fn mining(&self) -> MiningConfig {
        MiningConfig {
            a: self.a,
            fallback: self.fallback,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One direction of the loss: online on one view against target
/// projections of the other.
#[derive(Debug, Clone)]
pub struct DirectionResult {
    pub forward: OnlineForward,
    pub total: LossOutput,
    pub soft: Option<LossOutput>,
    pub hard: Option<LossOutput>,
    pub neighbor_sets: Vec<MinedNeighborSet>,
    pub weights: Vec<WeightVector>,
    /// Negatives per query before and after mining.
    pub hard_candidates: Vec<usize>,
    pub soft_candidates: Vec<usize>,
    pub hard_retained: Vec<usize>,
    pub soft_retained: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct StepEvaluation {
    pub directions: Vec<DirectionResult>,
    /// Target projections of the second view, enqueued after the step.
    pub z2: EmbeddingMatrix,
    pub loss_total: f64,
    pub loss_soft: Option<f64>,
    pub loss_hard: Option<f64>,
}

/// Negatives of query `i`: both target views of every other batch sample.
fn hard_negative_sets(own: &EmbeddingMatrix, other: &EmbeddingMatrix) -> Result<NegativeSets> {
    let n = own.rows();
    let pool = own.vstack(other)?;
    let members = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .flat_map(|j| [j, n + j])
                .collect()
        })
        .collect();
    NegativeSets::new(pool, members)
}

/// Negatives of query `i`: every member of the other queries' neighbor sets.
fn soft_negative_sets(sets: &[MinedNeighborSet], cols: usize) -> Result<NegativeSets> {
    let mut pool = EmbeddingMatrix::with_cols(cols)?;
    let mut ranges = Vec::with_capacity(sets.len());
    for s in sets {
        let start = pool.rows();
        for row in s.members.iter_rows() {
            pool.push_row(row)?;
        }
        ranges.push(start..pool.rows());
    }
    let members = (0..sets.len())
        .map(|i| {
            ranges
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .flat_map(|(_, r)| r.clone())
                .collect()
        })
        .collect();
    NegativeSets::new(pool, members)
}

fn anchor_similarities(q: &EmbeddingMatrix, z2: &EmbeddingMatrix) -> Vec<f64> {
    q.iter_rows()
        .zip(z2.iter_rows())
        .map(|(a, b)| dot(a, b).clamp(-1.0, 1.0))
        .collect()
}

fn mine(
    cfg: &TrainConfig,
    sets: NegativeSets,
    queries: &EmbeddingMatrix,
    anchors: &[f64],
    key: StreamKey,
) -> Result<NegativeSets> {
    if !cfg.use_pnsm {
        return Ok(sets);
    }
    Ok(filter_negative_sets(&sets, queries, anchors, &cfg.mining(), key)?.0)
}

#[allow(clippy::too_many_arguments)]
fn psm_direction(
    params: &NetworkParams,
    bank: &MemoryBank,
    cfg: &TrainConfig,
    online_view: &EmbeddingMatrix,
    target_own: &EmbeddingMatrix,
    target_other: &EmbeddingMatrix,
    key: StreamKey,
    direction: u64,
) -> Result<DirectionResult> {
    let fo = forward_online(&params.online, online_view, BnMode::Batch)?;
    let z2 = target_other;
    let neighbor_sets = z2
        .iter_rows()
        .map(|row| bank.query_topk(row, cfg.k))
        .collect::<Result<Vec<_>>>()?;
    let weights = neighbor_sets
        .iter()
        .enumerate()
        .map(|(i, set)| {
            let v0 = soft_weights(fo.z1.row(i), set, cfg.weight_span)?;
            Ok(apply_weight_strategy(&v0, cfg.strategy, set.mined()))
        })
        .collect::<Result<Vec<_>>>()?;

    let anchors = anchor_similarities(&fo.q1, z2);
    let hard_all = hard_negative_sets(target_own, z2)?;
    let soft_all = soft_negative_sets(&neighbor_sets, z2.cols())?;
    let hard_candidates = hard_all.counts();
    let soft_candidates = soft_all.counts();
    let hard_key = StreamKey {
        tag: TAG_HARD + (direction << 8),
        ..key
    };
    let soft_key = StreamKey {
        tag: TAG_SOFT + (direction << 8),
        ..key
    };
    let hard_negs = mine(cfg, hard_all, &fo.q1, &anchors, hard_key)?;
    let soft_negs = mine(cfg, soft_all, &fo.q1, &anchors, soft_key)?;

    let hard = cfg
        .use_hard
        .then(|| hard_loss(&fo.q1_raw, z2, &hard_negs, cfg.t, 1.0))
        .transpose()?;
    let soft = cfg
        .use_soft
        .then(|| soft_loss(&fo.q1_raw, &neighbor_sets, &weights, &soft_negs, cfg.t))
        .transpose()?;
    let total = match (&soft, &hard) {
        (Some(s), Some(h)) => psm_loss(s, h, cfg.lambda)?,
        (Some(s), None) => s.clone(),
        (None, Some(h)) => h.scaled(cfg.lambda),
        (None, None) => return Err(invalid("no loss enabled")),
    };
    Ok(DirectionResult {
        forward: fo,
        total,
        hard_retained: hard_negs.counts(),
        soft_retained: soft_negs.counts(),
        soft,
        hard,
        neighbor_sets,
        weights,
        hard_candidates,
        soft_candidates,
    })
}

fn summarize(directions: Vec<DirectionResult>, z2: EmbeddingMatrix) -> StepEvaluation {
    let sum_opt = |f: &dyn Fn(&DirectionResult) -> Option<f64>| -> Option<f64> {
        directions.iter().map(f).sum::<Option<f64>>()
    };
    StepEvaluation {
        loss_total: directions.iter().map(|d| d.total.value).sum(),
        loss_soft: sum_opt(&|d| d.soft.as_ref().map(|l| l.value)),
        loss_hard: sum_opt(&|d| d.hard.as_ref().map(|l| l.value)),
        directions,
        z2,
    }
}

/// Losses and gradients of one step on given views, without touching any
/// state. With `symmetrize` the views are also used the other way round and
/// the two directions are summed.
pub fn evaluate_views(
    params: &NetworkParams,
    bank: &MemoryBank,
    cfg: &TrainConfig,
    x1: &EmbeddingMatrix,
    x2: &EmbeddingMatrix,
    key: StreamKey,
) -> Result<StepEvaluation> {
    if cfg.baseline {
        return evaluate_baseline_views(params, cfg, x1, x2, key);
    }
    let zt1 = forward_target(&params.target, x1, BnMode::Batch)?;
    let z2 = forward_target(&params.target, x2, BnMode::Batch)?;
    if z2.cols() != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            got: z2.cols(),
        });
    }
    let mut directions = vec![psm_direction(params, bank, cfg, x1, &zt1, &z2, key, 0)?];
    if cfg.symmetrize {
        directions.push(psm_direction(params, bank, cfg, x2, &z2, &zt1, key, 1)?);
    }
    Ok(summarize(directions, z2))
}

fn baseline_direction(
    cfg: &TrainConfig,
    fo: OnlineForward,
    own: &EmbeddingMatrix,
    other: &EmbeddingMatrix,
    key: StreamKey,
) -> Result<DirectionResult> {
    let anchors = anchor_similarities(own, other);
    let all = hard_negative_sets(own, other)?;
    let candidates = all.counts();
    let negs = mine(cfg, all, &fo.q1, &anchors, key)?;
    let loss = infonce_loss(&fo.q1_raw, other, &negs, cfg.t)?;
    Ok(DirectionResult {
        forward: fo,
        total: loss.clone(),
        soft: None,
        hard: Some(loss),
        neighbor_sets: Vec::new(),
        weights: Vec::new(),
        hard_candidates: candidates,
        soft_candidates: Vec::new(),
        hard_retained: negs.counts(),
        soft_retained: Vec::new(),
    })
}

/// Symmetric two-view InfoNCE on one shared branch; keys are detached.
fn evaluate_baseline_views(
    params: &NetworkParams,
    cfg: &TrainConfig,
    x1: &EmbeddingMatrix,
    x2: &EmbeddingMatrix,
    key: StreamKey,
) -> Result<StepEvaluation> {
    let f1 = forward_online(&params.online, x1, BnMode::Batch)?;
    let f2 = forward_online(&params.online, x2, BnMode::Batch)?;
    let (z1, z2) = (f1.z1.clone(), f2.z1.clone());
    let k1 = StreamKey {
        tag: TAG_HARD,
        ..key
    };
    let k2 = StreamKey {
        tag: TAG_HARD + (1 << 8),
        ..key
    };
    let d1 = baseline_direction(cfg, f1, &z1, &z2, k1)?;
    let d2 = baseline_direction(cfg, f2, &z2, &z1, k2)?;
    Ok(summarize(vec![d1, d2], z2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub lr: f64,
    pub loss_total: f64,
    pub loss_soft: Option<f64>,
    pub loss_hard: Option<f64>,
    pub purity_top1: Option<f64>,
    pub purity_topk: Option<f64>,
    /// Mean over queries of retained hard plus soft negatives.
    pub neg_retained_mean: f64,
    /// Mined neighbors per query at query time.
    pub k_eff: usize,
    pub soft_negatives: Vec<usize>,
    pub hard_negatives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Learning rate at the start of the epoch.
    pub lr: f64,
    pub loss_total: f64,
    pub loss_soft: Option<f64>,
    pub loss_hard: Option<f64>,
    pub purity_top1: Option<f64>,
    pub purity_topk: Option<f64>,
    pub neg_retained_mean: f64,
    pub knn_acc: Option<f64>,
}

pub const METRICS_HEADER: [&str; 9] = [
    "epoch",
    "lr",
    "loss_total",
    "loss_soft",
    "loss_hard",
    "purity_top1",
    "purity_topk",
    "neg_retained_mean",
    "knn_acc",
];

pub fn write_metrics_csv<W: Write>(rows: &[EpochMetrics], w: W) -> Result<()> {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(w);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.loss_total.to_string(),
            cell(r.loss_soft),
            cell(r.loss_hard),
            cell(r.purity_top1),
            cell(r.purity_topk),
            r.neg_retained_mean.to_string(),
            cell(r.knn_acc),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mutable training state: network, optimizer, bank and purity log.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: NetworkParams,
    pub bank: MemoryBank,
    pub purity: PurityReport,
    /// Global step counter.
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        let arch = config.arch(input_dim);
        let params = NetworkParams::init(
            arch.clone(),
            config.seed,
            config.momentum,
            config.weight_decay,
            config.schedule(),
        )?;
        let bank = MemoryBank::with_labels(config.bank_capacity, arch.projection_dim())?;
        Ok(Self {
            purity: PurityReport::new(config.k),
            config,
            params,
            bank,
            step: 0,
        })
    }

    /// One optimization step on a batch of raw samples. `progress` is the
    /// fractional epoch used for the learning rate.
    pub fn train_step(
        &mut self,
        x: &EmbeddingMatrix,
        labels: &[i64],
        epoch: usize,
        batch: usize,
        progress: f64,
    ) -> Result<StepMetrics> {
        if labels.len() != x.rows() {
            return Err(Error::ArityMismatch {
                what: "batch labels",
                expected: x.rows(),
                got: labels.len(),
            });
        }
        let cfg = &self.config;
        let (x1, x2) = augment_batch(
            x,
            &cfg.augment,
            cfg.seed,
            &[TAG_AUGMENT, epoch as u64, self.step],
        )?;
        let key = StreamKey {
            seed: cfg.seed,
            tag: 0,
            epoch: epoch as u64,
            step: self.step,
        };
        let eval = evaluate_views(&self.params, &self.bank, cfg, &x1, &x2, key)?;
        for (name, v) in [
            ("total", Some(eval.loss_total)),
            ("soft", eval.loss_soft),
            ("hard", eval.loss_hard),
        ] {
            if v.is_some_and(|v| !v.is_finite()) {
                return Err(invalid(format!(
                    "{name} loss is not finite at step {}",
                    self.step
                )));
            }
        }

        let first = &eval.directions[0];
        let k_eff = first
            .neighbor_sets
            .first()
            .map_or(0, MinedNeighborSet::mined);
        let (mut purity_top1, mut purity_topk) = (None, None);
        if k_eff > 0 {
            let mined: Vec<Vec<i64>> = first
                .neighbor_sets
                .iter()
                .map(|s| s.mined_labels(&self.bank).expect("labelled bank"))
                .collect();
            let top1: Vec<Vec<i64>> = mined.iter().map(|m| m[..1].to_vec()).collect();
            let pk = purity(&mined, labels)?;
            purity_top1 = Some(purity(&top1, labels)?);
            purity_topk = Some(pk);
            self.purity.push(epoch, batch, pk);
        }
        let retained: usize = first.hard_retained.iter().chain(&first.soft_retained).sum();
        let neg_retained_mean = retained as f64 / x.rows() as f64;

        let lr = self.params.optimizer.schedule.lr_at(progress)?;
        let mut grads: Option<NetworkGrads> = None;
        for d in &eval.directions {
            let g = backward(&self.params.online, &d.forward.cache, &d.total.grad_q)?;
            match grads.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => grads = Some(g),
            }
        }
        for d in &eval.directions {
            update_running_stats(&mut self.params.online, &d.forward.cache);
        }
        let grads = grads.expect("at least one direction");
        sgd_step(
            &mut self.params.online,
            &grads,
            &mut self.params.optimizer,
            lr,
        )?;
        if !self.config.baseline {
            ema_update(
                &mut self.params.target,
                &self.params.online.branch,
                self.config.ema_momentum,
            )?;
            self.bank.enqueue_batch(&eval.z2, Some(labels))?;
        }
        self.step += 1;

        Ok(StepMetrics {
            lr,
            loss_total: eval.loss_total,
            loss_soft: eval.loss_soft,
            loss_hard: eval.loss_hard,
            purity_top1,
            purity_topk,
            neg_retained_mean,
            k_eff,
            soft_negatives: first.soft_retained.clone(),
            hard_negatives: first.hard_retained.clone(),
        })
    }

    /// One shuffled pass over `data`; the trailing partial batch is dropped.
    /// `epoch` is 0-based.
    pub fn train_epoch(
        &mut self,
        data: &Dataset,
        epoch: usize,
    ) -> Result<(EpochMetrics, Vec<StepMetrics>)> {
        let n = self.config.batch_size;
        let batches = data.len() / n;
        if batches == 0 {
            return Err(invalid(format!(
                "dataset has {} rows, fewer than the batch size {n}",
                data.len()
            )));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        RngState::derive(self.config.seed, &[TAG_SHUFFLE, epoch as u64]).shuffle(&mut order);
        let lr = self.params.optimizer.schedule.lr_at(epoch as f64)?;
        let mut steps = Vec::with_capacity(batches);
        for b in 0..batches {
            let subset = data.select(&order[b * n..(b + 1) * n]);
            let progress = epoch as f64 + b as f64 / batches as f64;
            steps.push(self.train_step(&subset.features, &subset.labels, epoch, b, progress)?);
        }
        self.params.optimizer.epoch = epoch as u64 + 1;
        let mean = |f: &dyn Fn(&StepMetrics) -> Option<f64>| -> Option<f64> {
            let v: Vec<f64> = steps.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            lr,
            loss_total: mean(&|s| Some(s.loss_total)).unwrap_or(0.0),
            loss_soft: mean(&|s| s.loss_soft),
            loss_hard: mean(&|s| s.loss_hard),
            purity_top1: mean(&|s| s.purity_top1),
            purity_topk: mean(&|s| s.purity_topk),
            neg_retained_mean: mean(&|s| Some(s.neg_retained_mean)).unwrap_or(0.0),
            knn_acc: None,
        };
        Ok((metrics, steps))
    }
}

/// Unit-normalized encoder features in inference mode.
pub fn representations(branch: &Branch, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    Ok(l2_normalize_rows(&encode(branch, x, BnMode::Running)?).matrix)
}

/// kNN probe accuracy of a branch's encoder features.
pub fn probe_knn(branch: &Branch, train: &Dataset, test: &Dataset, k_nn: usize) -> Result<f64> {
    let a = representations(branch, &train.features)?;
    let b = representations(branch, &test.features)?;
    knn_probe(&a, &train.labels, &b, &test.labels, k_nn)
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: TrainConfig,
    /// One row per epoch, epochs ascending.
    pub metrics: Vec<EpochMetrics>,
    pub params: NetworkParams,
    pub bank: MemoryBank,
    pub purity: PurityReport,
    /// kNN probe of the untrained encoder, when a test set was given.
    pub initial_knn: Option<f64>,
}

impl RunArtifacts {
    pub fn final_knn(&self) -> Option<f64> {
        self.metrics.last().and_then(|m| m.knn_acc)
    }

    pub fn write_metrics<W: Write>(&self, w: W) -> Result<()> {
        write_metrics_csv(&self.metrics, w)
    }

    /// Writes `config.json`, `metrics.csv`, `checkpoint.psmc`, `bank.psmb`
    /// and `purity.csv` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), self.config.to_json()? + "\n")?;
        self.write_metrics(std::fs::File::create(dir.join("metrics.csv"))?)?;
        save_checkpoint(&self.params, dir.join("checkpoint.psmc"))?;
        self.bank.save(dir.join("bank.psmb"))?;
        self.purity.save_csv(dir.join("purity.csv"))?;
        Ok(())
    }
}

fn run(config: TrainConfig, train: &Dataset, test: Option<&Dataset>) -> Result<RunArtifacts> {
    let mut trainer = Trainer::new(config, train.dim())?;
    if train.len() < trainer.config.batch_size {
        return Err(invalid(format!(
            "dataset has {} rows, fewer than the batch size {}",
            train.len(),
            trainer.config.batch_size
        )));
    }
    let k_nn = trainer.config.knn_k;
    let initial_knn = test
        .map(|t| probe_knn(&trainer.params.online.branch, train, t, k_nn))
        .transpose()?;
    let epochs = trainer.config.epochs;
    let every = trainer.config.probe_every;
    let mut metrics = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let (mut row, _) = trainer.train_epoch(train, e)?;
        let probe_now = e + 1 == epochs || (every > 0 && (e + 1) % every == 0);
        if let (true, Some(t)) = (probe_now, test) {
            row.knn_acc = Some(probe_knn(&trainer.params.online.branch, train, t, k_nn)?);
        }
        metrics.push(row);
    }
    Ok(RunArtifacts {
        config: trainer.config,
        metrics,
        params: trainer.params,
        bank: trainer.bank,
        purity: trainer.purity,
        initial_knn,
    })
}

/// Full pipeline pretraining. The kNN probe runs against `test` when given.
pub fn pretrain(
    config: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<RunArtifacts> {
    let mut cfg = config.clone();
    cfg.baseline = false;
    run(cfg, train, test)
}

/// Symmetric InfoNCE baseline, optionally with negative mining.
pub fn pretrain_baseline(
    config: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    use_pnsm: bool,
) -> Result<RunArtifacts> {
    let mut cfg = config.clone();
    cfg.baseline = true;
    cfg.use_pnsm = use_pnsm;
    run(cfg, train, test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub seed: u64,
    pub knn_acc: Option<f64>,
    pub purity_top1: Option<f64>,
    pub loss_total: f64,
}

/// Weighting strategies V0..V4 on top of `base`.
pub fn strategy_grid(base: &TrainConfig) -> Vec<AblationCell> {
    WeightStrategy::ALL
        .iter()
        .map(|&s| AblationCell {
            name: s.to_string(),
            config: TrainConfig {
                strategy: s,
                ..base.clone()
            },
        })
        .collect()
}

/// Full pipeline, each loss removed, negative mining removed, and the
/// baseline with and without negative mining.
pub fn component_grid(base: &TrainConfig) -> Vec<AblationCell> {
    let cell = |name: &str, f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        AblationCell {
            name: name.to_string(),
            config: c,
        }
    };
    vec![
        cell("full", &|_| {}),
        cell("no_soft", &|c| c.use_soft = false),
        cell("no_hard", &|c| c.use_hard = false),
        cell("no_pnsm", &|c| c.use_pnsm = false),
        cell("baseline", &|c| {
            c.baseline = true;
            c.use_pnsm = false;
        }),
        cell("baseline_pnsm", &|c| {
            c.baseline = true;
            c.use_pnsm = true;
        }),
    ]
}

/// One cell per value of a numeric hyper-parameter (`k`, `a`, `lambda` or `t`).
pub fn sweep_grid(base: &TrainConfig, param: &str, values: &[f64]) -> Result<Vec<AblationCell>> {
    values
        .iter()
        .map(|&v| {
            let mut c = base.clone();
            match param {
                "k" => {
                    if v < 0.0 || v.fract() != 0.0 {
                        return Err(invalid(format!("k must be a nonnegative integer, got {v}")));
                    }
                    c.k = v as usize;
                }
                "a" => c.a = v,
                "lambda" => c.lambda = v,
                "t" => c.t = v,
                other => return Err(invalid(format!("unknown sweep parameter {other:?}"))),
            }
            Ok(AblationCell {
                name: format!("{param}={v}"),
                config: c,
            })
        })
        .collect()
}

/// Runs every cell in order.
pub fn run_ablation_suite(
    cells: &[AblationCell],
    train: &Dataset,
    test: &Dataset,
) -> Result<Vec<AblationRow>> {
    if cells.is_empty() {
        return Err(invalid("ablation grid is empty"));
    }
    for c in cells {
        c.config.validate()?;
    }
    cells
        .iter()
        .map(|c| {
            let art = run(c.config.clone(), train, Some(test))?;
            let last = art.metrics.last();
            Ok(AblationRow {
                name: c.name.clone(),
                seed: c.config.seed,
                knn_acc: art.final_knn(),
                purity_top1: last.and_then(|m| m.purity_top1),
                loss_total: last.map_or(0.0, |m| m.loss_total),
            })
        })
        .collect()
}

/// `name,seed,knn_acc,purity_top1,loss_total`.
pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], w: W) -> Result<()> {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["name", "seed", "knn_acc", "purity_top1", "loss_total"])?;
    for r in rows {
        w.write_record([
            r.name.clone(),
            r.seed.to_string(),
            cell(r.knn_acc),
            cell(r.purity_top1),
            r.loss_total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
