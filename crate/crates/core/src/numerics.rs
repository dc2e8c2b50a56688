//! Dense row-major matrices, normalization, softmax, top-k selection and the
//! deterministic random source shared by the rest of the crate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Tolerance on `| ||x|| - 1 |` for a row to count as unit-norm.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Row-per-sample feature matrix in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 {
            return Err(invalid("embedding dimension must be at least 1"));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// An empty matrix with a fixed feature dimension.
    pub fn with_cols(cols: usize) -> Result<Self> {
        Self::new(0, cols, Vec::new())
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or_else(|| invalid("from_rows needs at least one row"))?;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                got: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Copies the listed rows, in the listed order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if other.cols != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                got: other.cols,
            });
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Self::new(self.rows + other.rows, self.cols, data)
    }

    /// Errors unless every row is unit-norm or exactly zero (a flagged zero row).
    pub fn check_normalized(&self, what: &'static str) -> Result<()> {
        for (row, r) in self.iter_rows().enumerate() {
            let norm = norm(r);
            if norm != 0.0 && (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::NotNormalized { what, row, norm });
            }
        }
        Ok(())
    }
}

/// Output of [`l2_normalize_rows`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub matrix: EmbeddingMatrix,
    /// Rows whose norm was zero; they are left as zeros.
    pub zero_rows: Vec<usize>,
}

impl Normalized {
    pub fn has_zero_rows(&self) -> bool {
        !self.zero_rows.is_empty()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scales each nonzero row to unit Euclidean norm.
pub fn l2_normalize_rows(m: &EmbeddingMatrix) -> Normalized {
    let mut out = m.clone();
    let mut zero_rows = Vec::new();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = norm(row);
        if n == 0.0 {
            zero_rows.push(i);
        } else {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    Normalized {
        matrix: out,
        zero_rows,
    }
}

/// Dot product of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(dot(a, b).clamp(-1.0, 1.0))
}

/// Pairwise cosine similarities, `rows(a) x rows(b)`, stored as a flat
/// row-major `Vec` together with the shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn similarity_matrix(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<SimilarityMatrix> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            expected: a.cols(),
            got: b.cols(),
        });
    }
    let mut values = Vec::with_capacity(a.rows() * b.rows());
    for ra in a.iter_rows() {
        for rb in b.iter_rows() {
            values.push(dot(ra, rb).clamp(-1.0, 1.0));
        }
    }
    Ok(SimilarityMatrix {
        rows: a.rows(),
        cols: b.rows(),
        values,
    })
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(invalid("softmax of an empty vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(invalid("softmax input must be finite"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Indices of the `min(k, len)` largest scores, highest first. Equal scores
/// are ordered by index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic random source. Substreams are keyed by a seed plus a path of
/// integers, e.g. `(tag, epoch, step, query)`, so draws never depend on the
/// order in which substreams are consumed.
#[derive(Debug, Clone)]
pub struct RngState {
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::derive(seed, &[])
    }

    pub fn derive(seed: u64, path: &[u64]) -> Self {
        let mut key = splitmix64(seed);
        for &component in path {
            key = splitmix64(key.rotate_left(23) ^ splitmix64(component));
        }
        let mut bytes = [0u8; 32];
        let mut word = key;
        for chunk in bytes.chunks_exact_mut(8) {
            word = splitmix64(word);
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        Self {
            inner: ChaCha8Rng::from_seed(bytes),
        }
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform draw in `[lo, hi]`; returns `lo` when the range is a point.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            lo
        } else {
            lo + (hi - lo) * self.uniform()
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    pub fn bernoulli(&mut self, p: f64) -> Result<bool> {
        if !(0.0..=1.0).contains(&p) {
            return Err(invalid(format!("bernoulli probability {p} outside [0, 1]")));
        }
        Ok(self.uniform() < p)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.random_range(0..=i);
            items.swap(i, j);
        }
    }
}

/// Free-function form of [`RngState::bernoulli`].
pub fn bernoulli(rng: &mut RngState, p: f64) -> Result<bool> {
    rng.bernoulli(p)
}
