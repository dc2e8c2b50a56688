//! Mining purity, the negative-gradient rank profile and representation
//! probes (kNN and linear).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::memory_bank::MemoryBank;
use crate::numerics::{dot, norm, softmax, top_k_indices, EmbeddingMatrix};

/// Neighbors used by the kNN probe unless configured otherwise.
pub const DEFAULT_KNN: usize = 20;
/// Rank depth of the gradient profile.
pub const DEFAULT_PROFILE_DEPTH: usize = 200;

/// Fraction of mined labels equal to the query's label, averaged over the
/// queries that mined anything.
pub fn purity(mined_labels: &[Vec<i64>], query_labels: &[i64]) -> Result<f64> {
    if mined_labels.len() != query_labels.len() {
        return Err(Error::ArityMismatch {
            what: "mined label lists",
            expected: query_labels.len(),
            got: mined_labels.len(),
        });
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for (mined, &q) in mined_labels.iter().zip(query_labels) {
        if mined.is_empty() {
            continue;
        }
        let hits = mined.iter().filter(|&&l| l == q).count();
        total += hits as f64 / mined.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(invalid("no query mined any neighbor"));
    }
    Ok(total / counted as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PurityRecord {
    pub epoch: usize,
    pub batch: usize,
    pub purity: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PurityReport {
    pub k: usize,
    pub records: Vec<PurityRecord>,
}

impl PurityReport {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, epoch: usize, batch: usize, purity: f64) {
        self.records.push(PurityRecord {
            epoch,
            batch,
            purity,
        });
    }

    /// Mean batch purity of one epoch, if any batch of it was measured.
    pub fn epoch_mean(&self, epoch: usize) -> Option<f64> {
        let values: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.purity)
            .collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }

    /// `epoch,batch,purity`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["epoch", "batch", "purity"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.batch.to_string(),
                r.purity.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Derivative of the binary cross-entropy loss with respect to a similarity
/// in `[0, 1]`: `s - 1` for positives and `s` for negatives.
pub fn bce_gradient_coefficient(s: f64, is_positive: bool) -> Result<f64> {
    if !(0.0..=1.0).contains(&s) {
        return Err(invalid(format!("similarity {s} outside [0, 1]")));
    }
    Ok(if is_positive { s - 1.0 } else { s })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientProfile {
    /// Mean statistic per rank (rank 1 first), divided by its maximum.
    pub mean: Vec<f64>,
    /// Variance across queries per rank, divided by its maximum.
    pub variance: Vec<f64>,
    /// Raw (unnormalized) per-rank means.
    pub raw_mean: Vec<f64>,
    pub raw_variance: Vec<f64>,
    /// Average 1-based rank the positive view would take among the bank
    /// entries.
    pub positive_rank: f64,
}

impl GradientProfile {
    /// `rank,mean_norm,var_norm`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["rank", "mean_norm", "var_norm"])?;
        for (r, (m, v)) in self.mean.iter().zip(&self.variance).enumerate() {
            w.write_record([(r + 1).to_string(), m.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn normalize_by_max(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        v.iter().map(|x| x / max).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Per-rank statistics of the negative-gradient contribution. For bank
/// entry `b` at rank `r` of query `q`, with `s' = (s(q, b) + 1) / 2`, the
/// statistic is `|coef(s', negative)| * |d s' / d q| = s' * |b| / 2`.
pub fn gradient_profile(
    queries: &EmbeddingMatrix,
    positives: &EmbeddingMatrix,
    bank: &MemoryBank,
    depth: usize,
) -> Result<GradientProfile> {
    if depth == 0 {
        return Err(invalid("rank depth must be positive"));
    }
    if bank.len() < depth {
        return Err(invalid(format!(
            "memory bank holds {} entries, profile needs {depth}",
            bank.len()
        )));
    }
    if queries.rows() != positives.rows() {
        return Err(Error::ArityMismatch {
            what: "positives",
            expected: queries.rows(),
            got: positives.rows(),
        });
    }
    if queries.rows() == 0 {
        return Err(invalid("gradient profile needs at least one query"));
    }
    for m in [queries, positives] {
        if m.cols() != bank.dim() {
            return Err(Error::DimensionMismatch {
                expected: bank.dim(),
                got: m.cols(),
            });
        }
    }
    queries.check_normalized("queries")?;
    positives.check_normalized("positives")?;

    let entries = bank.entries();
    let per_query: Vec<(Vec<f64>, usize)> = (0..queries.rows())
        .into_par_iter()
        .map(|i| {
            let q = queries.row(i);
            let sims = bank.similarities(q);
            let order = top_k_indices(&sims, depth);
            let stats = order
                .iter()
                .map(|&j| {
                    let s01 = (sims[j] + 1.0) / 2.0;
                    let coef =
                        bce_gradient_coefficient(s01.clamp(0.0, 1.0), false).expect("clamped");
                    coef.abs() * 0.5 * norm(entries.row(j))
                })
                .collect();
            let s_pos = dot(q, positives.row(i)).clamp(-1.0, 1.0);
            let rank = 1 + sims.iter().filter(|&&s| s > s_pos).count();
            (stats, rank)
        })
        .collect();

    let n = per_query.len() as f64;
    let mut raw_mean = vec![0.0; depth];
    for (stats, _) in &per_query {
        for (m, s) in raw_mean.iter_mut().zip(stats) {
            *m += s;
        }
    }
    raw_mean.iter_mut().for_each(|m| *m /= n);
    let mut raw_variance = vec![0.0; depth];
    for (stats, _) in &per_query {
        for ((v, s), m) in raw_variance.iter_mut().zip(stats).zip(&raw_mean) {
            *v += (s - m) * (s - m);
        }
    }
    raw_variance.iter_mut().for_each(|v| *v /= n);
    let positive_rank = per_query.iter().map(|(_, r)| *r as f64).sum::<f64>() / n;
    Ok(GradientProfile {
        mean: normalize_by_max(&raw_mean),
        variance: normalize_by_max(&raw_variance),
        raw_mean,
        raw_variance,
        positive_rank,
    })
}

fn check_probe_inputs(
    train: &EmbeddingMatrix,
    train_labels: &[i64],
    test: &EmbeddingMatrix,
    test_labels: &[i64],
) -> Result<()> {
    if train.rows() == 0 {
        return Err(invalid("probe needs a nonempty training set"));
    }
    if test.rows() == 0 {
        return Err(invalid("probe needs a nonempty test set"));
    }
    if train_labels.len() != train.rows() {
        return Err(Error::ArityMismatch {
            what: "train labels",
            expected: train.rows(),
            got: train_labels.len(),
        });
    }
    if test_labels.len() != test.rows() {
        return Err(Error::ArityMismatch {
            what: "test labels",
            expected: test.rows(),
            got: test_labels.len(),
        });
    }
    if train.cols() != test.cols() {
        return Err(Error::DimensionMismatch {
            expected: train.cols(),
            got: test.cols(),
        });
    }
    Ok(())
}

/// Accuracy of a majority vote over the `k_nn` most cosine-similar training
/// embeddings. Vote ties go to the smallest label.
pub fn knn_probe(
    train: &EmbeddingMatrix,
    train_labels: &[i64],
    test: &EmbeddingMatrix,
    test_labels: &[i64],
    k_nn: usize,
) -> Result<f64> {
    check_probe_inputs(train, train_labels, test, test_labels)?;
    if k_nn == 0 {
        return Err(invalid("k_nn must be at least 1"));
    }
    train.check_normalized("train embeddings")?;
    test.check_normalized("test embeddings")?;
    let correct: usize = (0..test.rows())
        .into_par_iter()
        .map(|i| {
            let q = test.row(i);
            let sims: Vec<f64> = train.iter_rows().map(|t| dot(q, t)).collect();
            let mut votes: BTreeMap<i64, usize> = BTreeMap::new();
            for j in top_k_indices(&sims, k_nn) {
                *votes.entry(train_labels[j]).or_default() += 1;
            }
            // BTreeMap iterates labels ascending; keep the first maximum.
            let predicted = votes
                .iter()
                .fold(
                    (i64::MIN, 0),
                    |best, (&l, &c)| if c > best.1 { (l, c) } else { best },
                )
                .0;
            usize::from(predicted == test_labels[i])
        })
        .sum();
    Ok(correct as f64 / test.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearProbeResult {
    pub top1: f64,
    pub topk: f64,
    /// `min(5, classes)`.
    pub k: usize,
}

/// Multinomial logistic regression on frozen embeddings, trained by
/// full-batch gradient descent from zero initialization.
pub fn linear_probe(
    train: &EmbeddingMatrix,
    train_labels: &[i64],
    test: &EmbeddingMatrix,
    test_labels: &[i64],
    epochs: usize,
    lr: f64,
) -> Result<LinearProbeResult> {
    check_probe_inputs(train, train_labels, test, test_labels)?;
    if !(lr.is_finite() && lr > 0.0) {
        return Err(invalid("probe learning rate must be positive"));
    }
    if train_labels.iter().chain(test_labels).any(|&l| l < 0) {
        return Err(invalid("labels must be nonnegative"));
    }
    let classes = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .map_or(1, |&m| m as usize + 1);
    let d = train.cols();
    let n = train.rows() as f64;
    let mut w = vec![0.0; classes * d];
    let mut b = vec![0.0; classes];
    let logits = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| dot(&w[c * d..(c + 1) * d], x) + b[c])
            .collect()
    };
    for _ in 0..epochs {
        let (gw, gb) = (0..train.rows())
            .into_par_iter()
            .map(|i| {
                let x = train.row(i);
                let mut p = softmax(&logits(&w, &b, x)).expect("finite logits");
                p[train_labels[i] as usize] -= 1.0;
                let mut gw = vec![0.0; classes * d];
                for c in 0..classes {
                    for (g, xj) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                        *g = p[c] * xj;
                    }
                }
                (gw, p)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold(
                (vec![0.0; classes * d], vec![0.0; classes]),
                |(mut aw, mut ab), (gw, gb)| {
                    aw.iter_mut().zip(&gw).for_each(|(a, g)| *a += g);
                    ab.iter_mut().zip(&gb).for_each(|(a, g)| *a += g);
                    (aw, ab)
                },
            );
        w.iter_mut().zip(&gw).for_each(|(p, g)| *p -= lr * g / n);
        b.iter_mut().zip(&gb).for_each(|(p, g)| *p -= lr * g / n);
    }
    let k = classes.min(5);
    let (mut top1, mut topk) = (0usize, 0usize);
    for (x, &y) in test.iter_rows().zip(test_labels) {
        let ranked = top_k_indices(&logits(&w, &b, x), k);
        top1 += usize::from(ranked.first() == Some(&(y as usize)));
        topk += usize::from(ranked.contains(&(y as usize)));
    }
    let m = test.rows() as f64;
    Ok(LinearProbeResult {
        top1: top1 as f64 / m,
        topk: topk as f64 / m,
        k,
    })
}
