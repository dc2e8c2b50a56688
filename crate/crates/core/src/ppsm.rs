//! Positive mining: soft neighbor weights, the hard and soft
//! contrastive losses, the weighting-strategy variants and the analytic
//! gradients of every loss with respect to the online predictions.
//!
//! All losses take the *pre-normalization* predictions `q`. Each row is
//! L2-normalized inside the loss, and the returned gradient already includes
//! the Jacobian of that normalization, so it can be handed straight to the
//! network's backward pass. Positives, negatives and weights are constants.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::memory_bank::MinedNeighborSet;
use crate::numerics::{dot, norm, softmax, EmbeddingMatrix};

/// How mined-positive weights are post-processed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WeightStrategy {
    /// Softmax weights as computed.
    #[default]
    V0,
    /// Drop entries below `1/k`, keep the rest unchanged.
    V1,
    /// V1 survivors set to `1/k'` where `k'` is the survivor count.
    V2,
    /// V1 survivors set to 1.
    V3,
    /// Every entry set to 1.
    V4,
}

impl WeightStrategy {
    pub const ALL: [WeightStrategy; 5] = [Self::V0, Self::V1, Self::V2, Self::V3, Self::V4];
}

impl fmt::Display for WeightStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::V0 => "v0",
            Self::V1 => "v1",
            Self::V2 => "v2",
            Self::V3 => "v3",
            Self::V4 => "v4",
        };
        f.write_str(s)
    }
}

impl FromStr for WeightStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v0" => Ok(Self::V0),
            "v1" => Ok(Self::V1),
            "v2" => Ok(Self::V2),
            "v3" => Ok(Self::V3),
            "v4" => Ok(Self::V4),
            other => Err(invalid(format!("unknown weight strategy {other:?}"))),
        }
    }
}

/// Which neighbor-set members the softmax in [`soft_weights`] runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightSpan {
    /// Softmax over the view and all mined neighbors (`k + 1` entries form a simplex).
    #[default]
    WithView,
    /// Softmax over mined neighbors only; the view keeps a fixed weight of 1.
    MinedOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    /// `w[0]` belongs to the augmented view, `w[1..]` to mined neighbors.
    pub weights: Vec<f64>,
    pub strategy: WeightStrategy,
}

impl WeightVector {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Softmax over `s(z1, NN(z2)_i)`; no temperature.
pub fn soft_weights(
    z1: &[f64],
    neighbors: &MinedNeighborSet,
    span: WeightSpan,
) -> Result<WeightVector> {
    if neighbors.is_empty() {
        return Err(invalid("neighbor set is empty"));
    }
    if z1.len() != neighbors.members.cols() {
        return Err(Error::DimensionMismatch {
            expected: neighbors.members.cols(),
            got: z1.len(),
        });
    }
    let sims: Vec<f64> = neighbors.members.iter_rows().map(|m| dot(z1, m)).collect();
    let weights = match span {
        WeightSpan::WithView => softmax(&sims)?,
        WeightSpan::MinedOnly if sims.len() == 1 => vec![1.0],
        WeightSpan::MinedOnly => {
            let mut w = Vec::with_capacity(sims.len());
            w.push(1.0);
            w.extend(softmax(&sims[1..])?);
            w
        }
    };
    Ok(WeightVector {
        weights,
        strategy: WeightStrategy::V0,
    })
}

/// Applies a weighting variant to V0 weights. `k` is the number of mined
/// neighbors the V1 threshold `1/k` is computed from (`k = 0` uses 1).
pub fn apply_weight_strategy(w: &WeightVector, strategy: WeightStrategy, k: usize) -> WeightVector {
    let threshold = 1.0 / k.max(1) as f64;
    let keep: Vec<bool> = w.weights.iter().map(|&x| x >= threshold).collect();
    let survivors = keep.iter().filter(|&&b| b).count();
    let weights = w
        .weights
        .iter()
        .zip(&keep)
        .map(|(&x, &kept)| match strategy {
            WeightStrategy::V0 => x,
            WeightStrategy::V1 if kept => x,
            WeightStrategy::V2 if kept => 1.0 / survivors as f64,
            WeightStrategy::V3 if kept => 1.0,
            WeightStrategy::V4 => 1.0,
            _ => 0.0,
        })
        .collect();
    WeightVector { weights, strategy }
}

/// Per-query negative sets as index lists into a shared pool of unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSets {
    pub pool: EmbeddingMatrix,
    pub members: Vec<Vec<usize>>,
}

impl NegativeSets {
    pub fn new(pool: EmbeddingMatrix, members: Vec<Vec<usize>>) -> Result<Self> {
        if let Some(&bad) = members.iter().flatten().find(|&&i| i >= pool.rows()) {
            return Err(invalid(format!(
                "negative index {bad} out of range for pool of {}",
                pool.rows()
            )));
        }
        Ok(Self { pool, members })
    }

    /// Every query gets no negatives.
    pub fn empty(cols: usize, queries: usize) -> Result<Self> {
        Self::new(EmbeddingMatrix::with_cols(cols)?, vec![Vec::new(); queries])
    }

    pub fn queries(&self) -> usize {
        self.members.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    pub fn rows_for(&self, query: usize) -> impl Iterator<Item = &[f64]> + '_ {
        self.members[query].iter().map(move |&i| self.pool.row(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Batch mean of the per-query terms.
    pub value: f64,
    /// d value / d q for the pre-normalization predictions.
    pub grad_q: EmbeddingMatrix,
    pub per_query: Vec<f64>,
    /// Negatives used by each query.
    pub retained_negatives: Vec<usize>,
}

impl LossOutput {
    pub fn zeros(queries: usize, cols: usize) -> Result<Self> {
        Ok(Self {
            value: 0.0,
            grad_q: EmbeddingMatrix::zeros(queries, cols)?,
            per_query: vec![0.0; queries],
            retained_negatives: vec![0; queries],
        })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.value *= factor;
        out.per_query.iter_mut().for_each(|v| *v *= factor);
        out.grad_q
            .as_mut_slice()
            .iter_mut()
            .for_each(|g| *g *= factor);
        out
    }
}

/// One query's weighted cross-entropy over a positive set and a negative set.
///
/// `loss = sum_i w_i (log Z - s_i / t)` with
/// `Z = sum_pos exp(s/t) + sum_neg exp(s/t)` and `s = <q/|q|, v>`.
pub(crate) fn weighted_term<'a, P, N>(
    q_raw: &[f64],
    positives: P,
    weights: &[f64],
    negatives: N,
    t: f64,
) -> (f64, Vec<f64>)
where
    P: IntoIterator<Item = &'a [f64]>,
    N: IntoIterator<Item = &'a [f64]>,
{
    let dim = q_raw.len();
    let q_norm = norm(q_raw);
    let u: Vec<f64> = if q_norm > 0.0 {
        q_raw.iter().map(|x| x / q_norm).collect()
    } else {
        vec![0.0; dim]
    };

    let pos: Vec<&[f64]> = positives.into_iter().collect();
    let neg: Vec<&[f64]> = negatives.into_iter().collect();
    debug_assert_eq!(pos.len(), weights.len());

    let logits: Vec<f64> = pos.iter().chain(&neg).map(|v| dot(&u, v) / t).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let log_z = max + total.ln();

    let w_sum: f64 = weights.iter().sum();
    let loss: f64 = weights
        .iter()
        .zip(&logits)
        .map(|(w, l)| if *w == 0.0 { 0.0 } else { w * (log_z - l) })
        .sum();

    let mut grad_u = vec![0.0; dim];
    for (j, v) in pos.iter().chain(&neg).enumerate() {
        let w = weights.get(j).copied().unwrap_or(0.0);
        let coeff = (w_sum * exps[j] / total - w) / t;
        if coeff != 0.0 {
            grad_u
                .iter_mut()
                .zip(v.iter())
                .for_each(|(g, x)| *g += coeff * x);
        }
    }

    if q_norm == 0.0 {
        return (loss, vec![0.0; dim]);
    }
    let radial = dot(&u, &grad_u);
    let grad = grad_u
        .iter()
        .zip(&u)
        .map(|(g, ui)| (g - radial * ui) / q_norm)
        .collect();
    (loss, grad)
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("temperature must be positive, got {t}")))
    }
}

fn check_queries(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ArityMismatch {
            what,
            expected,
            got,
        })
    }
}

/// Averages per-query `(loss, grad)` pairs in query order.
fn reduce(terms: Vec<(f64, Vec<f64>)>, cols: usize, retained: Vec<usize>) -> Result<LossOutput> {
    let n = terms.len();
    let scale = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let mut grad = Vec::with_capacity(n * cols);
    let mut per_query = Vec::with_capacity(n);
    let mut total = 0.0;
    for (loss, g) in terms {
        total += loss;
        per_query.push(loss);
        grad.extend(g.into_iter().map(|x| x * scale));
    }
    Ok(LossOutput {
        value: total * scale,
        grad_q: EmbeddingMatrix::new(n, cols, grad)?,
        per_query,
        retained_negatives: retained,
    })
}

/// Hard positive loss: the augmented view `z2` is the only positive, with
/// weight `w0`.
pub fn hard_loss(
    q: &EmbeddingMatrix,
    z2: &EmbeddingMatrix,
    negatives: &NegativeSets,
    t: f64,
    w0: f64,
) -> Result<LossOutput> {
    check_temperature(t)?;
    check_queries("positives", q.rows(), z2.rows())?;
    check_queries("negative sets", q.rows(), negatives.queries())?;
    if z2.cols() != q.cols() || negatives.pool.cols() != q.cols() {
        return Err(Error::DimensionMismatch {
            expected: q.cols(),
            got: if z2.cols() != q.cols() {
                z2.cols()
            } else {
                negatives.pool.cols()
            },
        });
    }
    z2.check_normalized("positives")?;
    negatives.pool.check_normalized("negatives")?;
    let weights = [w0];
    let terms: Vec<(f64, Vec<f64>)> = (0..q.rows())
        .into_par_iter()
        .map(|i| weighted_term(q.row(i), [z2.row(i)], &weights, negatives.rows_for(i), t))
        .collect();
    reduce(terms, q.cols(), negatives.counts())
}

/// Conventional InfoNCE: [`hard_loss`] with unit positive weight.
pub fn infonce_loss(
    q: &EmbeddingMatrix,
    positives: &EmbeddingMatrix,
    negatives: &NegativeSets,
    t: f64,
) -> Result<LossOutput> {
    hard_loss(q, positives, negatives, t, 1.0)
}

/// Soft positive loss over each query's neighbor set `NN(z2)_0..k`.
pub fn soft_loss(
    q: &EmbeddingMatrix,
    neighbor_sets: &[MinedNeighborSet],
    weights: &[WeightVector],
    negatives: &NegativeSets,
    t: f64,
) -> Result<LossOutput> {
    check_temperature(t)?;
    check_queries("neighbor sets", q.rows(), neighbor_sets.len())?;
    check_queries("weight vectors", q.rows(), weights.len())?;
    check_queries("negative sets", q.rows(), negatives.queries())?;
    if negatives.pool.cols() != q.cols() {
        return Err(Error::DimensionMismatch {
            expected: q.cols(),
            got: negatives.pool.cols(),
        });
    }
    for (set, w) in neighbor_sets.iter().zip(weights) {
        if set.members.cols() != q.cols() {
            return Err(Error::DimensionMismatch {
                expected: q.cols(),
                got: set.members.cols(),
            });
        }
        check_queries("weights", set.len(), w.len())?;
        if w.weights.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(invalid("weights must be finite and nonnegative"));
        }
        set.members.check_normalized("neighbor set")?;
    }
    negatives.pool.check_normalized("negatives")?;
    let terms: Vec<(f64, Vec<f64>)> = (0..q.rows())
        .into_par_iter()
        .map(|i| {
            weighted_term(
                q.row(i),
                neighbor_sets[i].members.iter_rows(),
                &weights[i].weights,
                negatives.rows_for(i),
                t,
            )
        })
        .collect();
    reduce(terms, q.cols(), negatives.counts())
}

/// `soft + lambda * hard`, values and gradients alike.
pub fn psm_loss(soft: &LossOutput, hard: &LossOutput, lambda: f64) -> Result<LossOutput> {
    if soft.grad_q.rows() != hard.grad_q.rows() || soft.grad_q.cols() != hard.grad_q.cols() {
        return Err(Error::DimensionMismatch {
            expected: soft.grad_q.rows() * soft.grad_q.cols(),
            got: hard.grad_q.rows() * hard.grad_q.cols(),
        });
    }
    combine(soft, 1.0, hard, lambda)
}

/// `a_scale * a + b_scale * b`; retained counts are summed.
pub(crate) fn combine(
    a: &LossOutput,
    a_scale: f64,
    b: &LossOutput,
    b_scale: f64,
) -> Result<LossOutput> {
    let grad: Vec<f64> = a
        .grad_q
        .as_slice()
        .iter()
        .zip(b.grad_q.as_slice())
        .map(|(x, y)| a_scale * x + b_scale * y)
        .collect();
    Ok(LossOutput {
        value: a_scale * a.value + b_scale * b.value,
        grad_q: EmbeddingMatrix::new(a.grad_q.rows(), a.grad_q.cols(), grad)?,
        per_query: a
            .per_query
            .iter()
            .zip(&b.per_query)
            .map(|(x, y)| a_scale * x + b_scale * y)
            .collect(),
        retained_negatives: a
            .retained_negatives
            .iter()
            .zip(&b.retained_negatives)
            .map(|(x, y)| x + y)
            .collect(),
    })
}
