//! Shared fixtures for the integration tests and the acceptance harness.
#![allow(dead_code)]

use psm::data::ClusterSpec;
use psm::memory_bank::MinedNeighborSet;
use psm::network::{backward, forward_online, ArchSpec, BnFlags, BnMode, OnlineNetwork};
use psm::numerics::{l2_normalize_rows, EmbeddingMatrix, RngState};
use psm::pnsm::{filter_negative_sets, MiningConfig, StreamKey};
use psm::ppsm::{
    apply_weight_strategy, hard_loss, psm_loss, soft_loss, soft_weights, LossOutput, NegativeSets,
    WeightSpan, WeightStrategy, WeightVector,
};
use psm::trainer::TrainConfig;

pub const FD_STEP: f64 = 1e-6;
/// Denominator floor of [`rel_err`] per unit of loss. Central differences at
/// `h = 1e-6` carry absolute round-off of about `eps * |L| / h`, so relative
/// error is only meaningful for components well above that.
pub const REL_FLOOR: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, REL_FLOOR * max(1, |loss|))`.
pub fn rel_err(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let floor = REL_FLOOR * loss.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut RngState) -> EmbeddingMatrix {
    EmbeddingMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

pub fn unit(rows: usize, cols: usize, rng: &mut RngState) -> EmbeddingMatrix {
    l2_normalize_rows(&gaussian(rows, cols, rng)).matrix
}

/// Everything a loss needs, with negatives already fixed.
pub struct LossInstance {
    pub q: EmbeddingMatrix,
    pub z2: EmbeddingMatrix,
    pub sets: Vec<MinedNeighborSet>,
    pub weights: Vec<WeightVector>,
    pub hard_negs: NegativeSets,
    pub soft_negs: NegativeSets,
    pub t: f64,
    pub lambda: f64,
}

fn neighbor_set(z2: &[f64], mined: &EmbeddingMatrix) -> MinedNeighborSet {
    let mut members = EmbeddingMatrix::from_rows(&[z2]).unwrap();
    let mut sims = vec![1.0];
    for row in mined.iter_rows() {
        members.push_row(row).unwrap();
        sims.push(psm::numerics::dot(z2, row));
    }
    MinedNeighborSet {
        members,
        bank_indices: (0..mined.rows()).collect(),
        similarities: sims,
    }
}

/// Random instance with `n` queries, `k` mined neighbors, dimension `d`.
/// With `mask` the negative sets are thinned once by Bernoulli mining and
/// then frozen.
pub fn loss_instance(n: usize, k: usize, d: usize, t: f64, mask: bool, seed: u64) -> LossInstance {
    let mut rng = RngState::new(seed);
    let q = gaussian(n, d, &mut rng);
    let z1 = unit(n, d, &mut rng);
    let z2 = unit(n, d, &mut rng);
    let sets: Vec<MinedNeighborSet> = (0..n)
        .map(|i| neighbor_set(z2.row(i), &unit(k, d, &mut rng)))
        .collect();
    let strategy = WeightStrategy::ALL[(rng.next_u64() % 5) as usize];
    let weights = sets
        .iter()
        .enumerate()
        .map(|(i, s)| {
            apply_weight_strategy(
                &soft_weights(z1.row(i), s, WeightSpan::WithView).unwrap(),
                strategy,
                k,
            )
        })
        .collect();

    let target_own = unit(n, d, &mut rng);
    let pool = target_own.vstack(&z2).unwrap();
    let hard_members = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .flat_map(|j| [j, n + j])
                .collect()
        })
        .collect();
    let mut hard_negs = NegativeSets::new(pool, hard_members).unwrap();

    let mut soft_pool = EmbeddingMatrix::with_cols(d).unwrap();
    for s in &sets {
        for row in s.members.iter_rows() {
            soft_pool.push_row(row).unwrap();
        }
    }
    let soft_members = (0..n)
        .map(|i| (0..n * (k + 1)).filter(|j| j / (k + 1) != i).collect())
        .collect();
    let mut soft_negs = NegativeSets::new(soft_pool, soft_members).unwrap();

    if mask {
        let qn = l2_normalize_rows(&q).matrix;
        let anchors: Vec<f64> = (0..n)
            .map(|i| psm::numerics::dot(qn.row(i), z2.row(i)))
            .collect();
        let cfg = MiningConfig::new(2.0).unwrap();
        let key = StreamKey {
            seed,
            tag: 1,
            epoch: 0,
            step: 0,
        };
        hard_negs = filter_negative_sets(&hard_negs, &qn, &anchors, &cfg, key)
            .unwrap()
            .0;
        let key = StreamKey { tag: 2, ..key };
        soft_negs = filter_negative_sets(&soft_negs, &qn, &anchors, &cfg, key)
            .unwrap()
            .0;
    }
    LossInstance {
        q,
        z2,
        sets,
        weights,
        hard_negs,
        soft_negs,
        t,
        lambda: 0.5 + rng.uniform(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Hard,
    Soft,
    Psm,
}

pub fn loss_of(inst: &LossInstance, q: &EmbeddingMatrix, which: Which) -> LossOutput {
    let hard = || hard_loss(q, &inst.z2, &inst.hard_negs, inst.t, 1.0).unwrap();
    let soft = || soft_loss(q, &inst.sets, &inst.weights, &inst.soft_negs, inst.t).unwrap();
    match which {
        Which::Hard => hard(),
        Which::Soft => soft(),
        Which::Psm => psm_loss(&soft(), &hard(), inst.lambda).unwrap(),
    }
}

/// Largest per-component relative error between the analytic gradient and
/// central differences.
pub fn loss_gradient_error(inst: &LossInstance, which: Which) -> f64 {
    let base = loss_of(inst, &inst.q, which);
    let analytic = base.grad_q;
    let mut worst: f64 = 0.0;
    for idx in 0..inst.q.as_slice().len() {
        let mut plus = inst.q.clone();
        plus.as_mut_slice()[idx] += FD_STEP;
        let mut minus = inst.q.clone();
        minus.as_mut_slice()[idx] -= FD_STEP;
        let numeric = (loss_of(inst, &plus, which).value - loss_of(inst, &minus, which).value)
            / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic.as_slice()[idx], numeric, base.value));
    }
    worst
}

/// Toy online network for end-to-end checks: input 8, widths at most 16.
pub fn toy_network(bn: bool, seed: u64) -> OnlineNetwork {
    let arch = ArchSpec {
        input_dim: 8,
        encoder: vec![16, 12],
        projector: vec![16, 8],
        predictor: vec![12, 8],
        batch_norm: if bn {
            BnFlags::default()
        } else {
            BnFlags::none()
        },
    };
    OnlineNetwork::init(&arch, &mut RngState::new(seed)).unwrap()
}

fn pipeline_loss(
    net: &OnlineNetwork,
    x: &EmbeddingMatrix,
    inst: &LossInstance,
) -> (f64, LossOutput) {
    let out = forward_online(net, x, BnMode::Batch).unwrap();
    let loss = loss_of(inst, &out.q1_raw, Which::Psm);
    (loss.value, loss)
}

/// Largest relative error over every trainable parameter of the toy network
/// under the full soft + hard loss (batch 4, k = 2).
pub fn network_gradient_error(bn: bool, seed: u64) -> (f64, usize) {
    let mut net = toy_network(bn, seed);
    let mut rng = RngState::new(seed ^ 0xABCD);
    let x = gaussian(4, 8, &mut rng);
    let inst = loss_instance(4, 2, 8, 0.5, true, seed);
    let out = forward_online(&net, &x, BnMode::Batch).unwrap();
    let (value, loss) = pipeline_loss(&net, &x, &inst);
    let grads = backward(&net, &out.cache, &loss.grad_q).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(<[f64]>::to_vec).collect();

    let sizes = net.trainable_sizes();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (ti, &size) in sizes.iter().enumerate() {
        for j in 0..size {
            let orig = net.trainable_mut()[ti][j];
            net.trainable_mut()[ti][j] = orig + FD_STEP;
            let up = pipeline_loss(&net, &x, &inst).0;
            net.trainable_mut()[ti][j] = orig - FD_STEP;
            let down = pipeline_loss(&net, &x, &inst).0;
            net.trainable_mut()[ti][j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[ti][j], numeric, value));
            checked += 1;
        }
    }
    (worst, checked)
}

/// The desk-scale clusters: 4 classes, d = 32, 512 train and 128 test per
/// class, separation 6.
pub fn desk_clusters(seed: u64) -> (psm::data::Dataset, psm::data::Dataset) {
    ClusterSpec {
        classes: 4,
        dim: 32,
        train_per_class: 512,
        test_per_class: 128,
        separation: 6.0,
        seed,
    }
    .generate()
    .unwrap()
}

pub fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..TrainConfig::default()
    }
}
