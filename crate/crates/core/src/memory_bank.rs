//! Fixed-capacity FIFO queue of target-branch embeddings with top-k queries.

use std::io::{Read, Write};

use crate::error::{invalid, Error, Result};
use crate::io_util::{read_array, read_f64s, read_i64s, write_f64s, write_i64s, ByteReader};
use crate::numerics::{dot, top_k_indices, EmbeddingMatrix};

/// Capacity used by the full-scale configuration (2^14).
pub const FULL_BANK_CAPACITY: usize = 16_384;
/// Capacity used by the desk-scale defaults.
pub const DESK_BANK_CAPACITY: usize = 2_048;

const BANK_MAGIC: &[u8; 4] = b"PSMB";
const BANK_VERSION: u32 = 1;

/// Ring buffer of unit-norm embeddings. Logical index 0 is always the oldest
/// stored entry.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    data: Vec<f64>,
    labels: Option<Vec<i64>>,
    len: usize,
    /// Physical slot of the oldest entry.
    head: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(invalid(
                "memory bank capacity and dimension must be positive",
            ));
        }
        Ok(Self {
            capacity,
            dim,
            data: vec![0.0; capacity * dim],
            labels: None,
            len: 0,
            head: 0,
        })
    }

    /// A bank that stores one label per entry alongside the embedding.
    pub fn with_labels(capacity: usize, dim: usize) -> Result<Self> {
        let mut bank = Self::new(capacity, dim)?;
        bank.labels = Some(vec![0; capacity]);
        Ok(bank)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    fn slot(&self, i: usize) -> usize {
        (self.head + i) % self.capacity
    }

    /// Entry `i` in enqueue order (0 = oldest).
    pub fn entry(&self, i: usize) -> &[f64] {
        assert!(i < self.len, "bank index {i} out of range ({})", self.len);
        let s = self.slot(i);
        &self.data[s * self.dim..(s + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> Option<i64> {
        assert!(i < self.len, "bank index {i} out of range ({})", self.len);
        self.labels.as_ref().map(|l| l[self.slot(i)])
    }

    /// Stored embeddings in enqueue order.
    pub fn entries(&self) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(self.len * self.dim);
        for i in 0..self.len {
            data.extend_from_slice(self.entry(i));
        }
        EmbeddingMatrix::new(self.len, self.dim, data).expect("bank shape")
    }

    pub fn labels(&self) -> Option<Vec<i64>> {
        self.labels
            .as_ref()
            .map(|l| (0..self.len).map(|i| l[self.slot(i)]).collect())
    }

    /// Appends a batch, evicting the oldest entries beyond capacity. The bank
    /// copies the values; later changes to `batch` are not observed.
    pub fn enqueue_batch(&mut self, batch: &EmbeddingMatrix, labels: Option<&[i64]>) -> Result<()> {
        if batch.cols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: batch.cols(),
            });
        }
        match (&self.labels, labels) {
            (Some(_), None) => return Err(invalid("labelled bank requires labels on enqueue")),
            (None, Some(_)) => return Err(invalid("bank was created without labels")),
            (_, Some(l)) if l.len() != batch.rows() => {
                return Err(Error::ArityMismatch {
                    what: "labels",
                    expected: batch.rows(),
                    got: l.len(),
                })
            }
            _ => {}
        }
        batch.check_normalized("memory bank batch")?;
        for (r, row) in batch.iter_rows().enumerate() {
            let slot = if self.len < self.capacity {
                self.len += 1;
                self.slot(self.len - 1)
            } else {
                let s = self.head;
                self.head = (self.head + 1) % self.capacity;
                s
            };
            self.data[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(row);
            if let (Some(store), Some(l)) = (self.labels.as_mut(), labels) {
                store[slot] = l[r];
            }
        }
        Ok(())
    }

    /// Cosine similarity of `z` against every stored entry, in enqueue order.
    pub fn similarities(&self, z: &[f64]) -> Vec<f64> {
        (0..self.len)
            .map(|i| dot(z, self.entry(i)).clamp(-1.0, 1.0))
            .collect()
    }

    /// The augmented view itself followed by its `min(k, len)` most similar
    /// bank entries.
    pub fn query_topk(&self, z2: &[f64], k: usize) -> Result<MinedNeighborSet> {
        if z2.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: z2.len(),
            });
        }
        let sims = self.similarities(z2);
        let top = top_k_indices(&sims, k);
        let mut members = EmbeddingMatrix::with_cols(self.dim)?;
        members.push_row(z2)?;
        let mut similarities = Vec::with_capacity(top.len() + 1);
        similarities.push(1.0);
        for &i in &top {
            members.push_row(self.entry(i))?;
            similarities.push(sims[i]);
        }
        Ok(MinedNeighborSet {
            members,
            bank_indices: top,
            similarities,
        })
    }

    /// Writes the little-endian dump: header, then `count * dim` f64 values in
    /// enqueue order, then `count` i64 labels when present.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BANK_MAGIC)?;
        w.write_all(&BANK_VERSION.to_le_bytes())?;
        w.write_all(&(self.capacity as u64).to_le_bytes())?;
        w.write_all(&(self.len as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&[u8::from(self.has_labels())])?;
        write_f64s(&mut w, self.entries().as_slice())?;
        if let Some(labels) = self.labels() {
            write_i64s(&mut w, &labels)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = ByteReader::new(r);
        let magic: [u8; 4] = read_array(&mut r)?;
        if &magic != BANK_MAGIC {
            return Err(Error::Format("not a memory bank dump (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != BANK_VERSION {
            return Err(Error::Format(format!("unsupported bank version {version}")));
        }
        let capacity = r.u64()? as usize;
        let count = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let has_labels = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("bad has_labels byte {b}"))),
        };
        if count > capacity {
            return Err(Error::Format(format!(
                "count {count} exceeds capacity {capacity}"
            )));
        }
        let values = read_f64s(&mut r, count * dim)?;
        let labels = if has_labels {
            Some(read_i64s(&mut r, count)?)
        } else {
            None
        };
        let mut bank = if has_labels {
            Self::with_labels(capacity, dim)?
        } else {
            Self::new(capacity, dim)?
        };
        if count > 0 {
            let m = EmbeddingMatrix::new(count, dim, values)?;
            bank.enqueue_batch(&m, labels.as_deref())?;
        }
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// `NN(z2)`: row 0 of `members` is the query's own augmented view, rows
/// `1..` are mined bank entries by descending similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedNeighborSet {
    pub members: EmbeddingMatrix,
    /// Bank positions (enqueue order) of members `1..`.
    pub bank_indices: Vec<usize>,
    /// Similarity of each member to the view; entry 0 is 1.
    pub similarities: Vec<f64>,
}

impl MinedNeighborSet {
    /// Number of members including the view itself.
    pub fn len(&self) -> usize {
        self.members.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Number of mined neighbors (excludes the view).
    pub fn mined(&self) -> usize {
        self.bank_indices.len()
    }

    /// Labels of the mined members, when the bank holds labels.
    pub fn mined_labels(&self, bank: &MemoryBank) -> Option<Vec<i64>> {
        bank.has_labels().then(|| {
            self.bank_indices
                .iter()
                .map(|&i| bank.label(i).expect("labelled bank"))
                .collect()
        })
    }
}
