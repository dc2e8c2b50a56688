//! Probabilistic negative mining.
//!
//! Each candidate negative is kept by an independent Bernoulli trial with
//! probability `exp(-a (s_neg - s_pos)^2)`, which peaks for negatives that
//! are exactly as similar to the query as its positive is. Mining works on
//! detached similarities and can filter the denominator of any contrastive
//! loss built on [`NegativeSets`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{dot, EmbeddingMatrix, RngState};
use crate::ppsm::NegativeSets;

/// What to do when every candidate of a nonempty set is rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Keep the candidate with the largest mining probability.
    #[default]
    KeepMostProbable,
    /// Leave the set empty.
    AllowEmpty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    /// Density of the mining distribution; 0 keeps every candidate.
    pub a: f64,
    pub fallback: Fallback,
}

impl MiningConfig {
    pub fn new(a: f64) -> Result<Self> {
        if a.is_nan() || a < 0.0 {
            return Err(invalid(format!("mining density a must be >= 0, got {a}")));
        }
        Ok(Self {
            a,
            fallback: Fallback::default(),
        })
    }
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            a: 0.5,
            fallback: Fallback::default(),
        }
    }
}

/// Identifies the random substreams of one mining pass. Query `i` draws from
/// `RngState::derive(seed, [tag, epoch, step, i])`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    pub seed: u64,
    pub tag: u64,
    pub epoch: u64,
    pub step: u64,
}

impl StreamKey {
    pub fn query_rng(&self, query: usize) -> RngState {
        RngState::derive(self.seed, &[self.tag, self.epoch, self.step, query as u64])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinedNegativeSet {
    pub query: usize,
    /// Positions of the kept negatives within the candidate list.
    pub retained: Vec<usize>,
    /// Mining probability of every candidate, in candidate order.
    pub probabilities: Vec<f64>,
    /// Whether the fallback rule supplied the only retained candidate.
    pub fell_back: bool,
}

pub fn mining_probability(s_neg: f64, s_pos: f64, a: f64) -> Result<f64> {
    if a.is_nan() || a < 0.0 {
        return Err(invalid(format!("mining density a must be >= 0, got {a}")));
    }
    let diff = s_neg - s_pos;
    Ok((-a * diff * diff).exp())
}

fn mine_from_similarities(
    query: usize,
    s_pos: f64,
    sims: impl Iterator<Item = f64>,
    cfg: &MiningConfig,
    rng: &mut RngState,
) -> Result<MinedNegativeSet> {
    let probabilities = sims
        .map(|s| mining_probability(s, s_pos, cfg.a))
        .collect::<Result<Vec<_>>>()?;
    let mut retained = Vec::new();
    for (i, &p) in probabilities.iter().enumerate() {
        if rng.bernoulli(p)? {
            retained.push(i);
        }
    }
    let mut fell_back = false;
    if retained.is_empty()
        && !probabilities.is_empty()
        && cfg.fallback == Fallback::KeepMostProbable
    {
        let best = probabilities.iter().enumerate().fold(0, |best, (i, &p)| {
            if p > probabilities[best] {
                i
            } else {
                best
            }
        });
        retained.push(best);
        fell_back = true;
    }
    Ok(MinedNegativeSet {
        query,
        retained,
        probabilities,
        fell_back,
    })
}

/// Mines the negatives of one query. `q1` is the unit query, `s_pos` its
/// similarity to the positive view.
pub fn mine_negatives(
    q1: &[f64],
    s_pos: f64,
    candidates: &EmbeddingMatrix,
    cfg: &MiningConfig,
    rng: &mut RngState,
) -> Result<MinedNegativeSet> {
    if !candidates.is_empty() && candidates.cols() != q1.len() {
        return Err(Error::DimensionMismatch {
            expected: q1.len(),
            got: candidates.cols(),
        });
    }
    mine_from_similarities(
        0,
        s_pos,
        candidates.iter_rows().map(|c| dot(q1, c)),
        cfg,
        rng,
    )
}

/// Mines every query's candidate set independently and returns the filtered
/// sets (same pool) together with per-query mining records.
///
/// `queries` are unit rows; `positive_sims[i]` is the anchor `s(q_i, z2_i)`.
pub fn filter_negative_sets(
    candidates: &NegativeSets,
    queries: &EmbeddingMatrix,
    positive_sims: &[f64],
    cfg: &MiningConfig,
    key: StreamKey,
) -> Result<(NegativeSets, Vec<MinedNegativeSet>)> {
    let n = candidates.queries();
    if queries.rows() != n {
        return Err(Error::ArityMismatch {
            what: "queries",
            expected: n,
            got: queries.rows(),
        });
    }
    if positive_sims.len() != n {
        return Err(Error::ArityMismatch {
            what: "positive similarities",
            expected: n,
            got: positive_sims.len(),
        });
    }
    if queries.cols() != candidates.pool.cols() {
        return Err(Error::DimensionMismatch {
            expected: candidates.pool.cols(),
            got: queries.cols(),
        });
    }
    let mined = (0..n)
        .into_par_iter()
        .map(|i| {
            let q = queries.row(i);
            let mut rng = key.query_rng(i);
            mine_from_similarities(
                i,
                positive_sims[i],
                candidates.rows_for(i).map(|c| dot(q, c)),
                cfg,
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let members = mined
        .iter()
        .map(|m| {
            m.retained
                .iter()
                .map(|&j| candidates.members[m.query][j])
                .collect()
        })
        .collect();
    let filtered = NegativeSets::new(candidates.pool.clone(), members)?;
    Ok((filtered, mined))
}
