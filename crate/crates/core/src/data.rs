//! Synthetic labelled clusters, two-view augmentation and dataset files.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io_util::{read_array, read_f64s, read_i64s, write_f64s, write_i64s, ByteReader};
use crate::numerics::{l2_normalize_rows, EmbeddingMatrix, RngState};

const DATASET_MAGIC: &[u8; 4] = b"PSMD";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Raw (not normalized) features.
    pub features: EmbeddingMatrix,
    /// Class index per row. Never used by the training losses.
    pub labels: Vec<i64>,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: EmbeddingMatrix, labels: Vec<i64>, split: Split) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::ArityMismatch {
                what: "labels",
                expected: features.rows(),
                got: labels.len(),
            });
        }
        if labels.iter().any(|&l| l < 0) {
            return Err(invalid("labels must be nonnegative"));
        }
        Ok(Self {
            features,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m as usize + 1)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }
}

/// Parameters of the Gaussian-cluster generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Radius of the sphere the class means are drawn on.
    pub separation: f64,
    pub seed: u64,
}

impl ClusterSpec {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(invalid("need at least 2 classes"));
        }
        if self.dim < 2 {
            return Err(invalid("need at least 2 feature dimensions"));
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return Err(invalid("separation must be positive"));
        }
        Ok(())
    }

    /// Class means: Gaussian directions scaled onto the sphere of radius
    /// `separation`.
    pub fn means(&self) -> Result<EmbeddingMatrix> {
        self.validate()?;
        let mut rng = RngState::derive(self.seed, &[0xC1, 0]);
        let raw = EmbeddingMatrix::new(
            self.classes,
            self.dim,
            (0..self.classes * self.dim).map(|_| rng.normal()).collect(),
        )?;
        let mut means = l2_normalize_rows(&raw).matrix;
        means
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v *= self.separation);
        Ok(means)
    }

    fn sample(&self, means: &EmbeddingMatrix, per_class: usize, split: Split) -> Result<Dataset> {
        let stream = match split {
            Split::Train => 1,
            Split::Test => 2,
        };
        let mut rng = RngState::derive(self.seed, &[0xC1, stream]);
        let mut data = Vec::with_capacity(self.classes * per_class * self.dim);
        let mut labels = Vec::with_capacity(self.classes * per_class);
        for c in 0..self.classes {
            for _ in 0..per_class {
                data.extend(means.row(c).iter().map(|m| m + rng.normal()));
                labels.push(c as i64);
            }
        }
        let features = EmbeddingMatrix::new(labels.len(), self.dim, data)?;
        Dataset::new(features, labels, split)
    }

    /// Train and test sets sharing class means, drawn from disjoint streams.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        let means = self.means()?;
        Ok((
            self.sample(&means, self.train_per_class, Split::Train)?,
            self.sample(&means, self.test_per_class, Split::Test)?,
        ))
    }
}

/// `classes * n_per_class` unit-variance samples around class means on a
/// sphere of radius `separation`.
pub fn gen_clusters(
    classes: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    let spec = ClusterSpec {
        classes,
        dim,
        train_per_class: n_per_class,
        test_per_class: 0,
        separation,
        seed,
    };
    let means = spec.means()?;
    spec.sample(&means, n_per_class, Split::Train)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub noise_std: f64,
    pub dropout: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            noise_std: 0.1,
            dropout: 0.2,
            scale_lo: 0.8,
            scale_hi: 1.25,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            noise_std: 0.0,
            dropout: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err(invalid("noise std must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("dropout must be in [0, 1)"));
        }
        if !(self.scale_lo > 0.0 && self.scale_lo <= self.scale_hi) {
            return Err(invalid("scale range must satisfy 0 < lo <= hi"));
        }
        Ok(())
    }

    /// `scale * mask * (x + noise)`.
    fn apply(&self, x: &[f64], rng: &mut RngState) -> Vec<f64> {
        let scale = rng.uniform_in(self.scale_lo, self.scale_hi);
        x.iter()
            .map(|&v| {
                let noise = if self.noise_std > 0.0 {
                    self.noise_std * rng.normal()
                } else {
                    0.0
                };
                let kept = self.dropout == 0.0 || rng.uniform() >= self.dropout;
                if kept {
                    scale * (v + noise)
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Two independent augmentations of one sample. Each view draws from its own
/// substream seeded off `rng`.
pub fn two_views(
    x: &[f64],
    policy: &AugmentPolicy,
    rng: &mut RngState,
) -> Result<(Vec<f64>, Vec<f64>)> {
    policy.validate()?;
    let mut first = RngState::new(rng.next_u64());
    let mut second = RngState::new(rng.next_u64());
    Ok((policy.apply(x, &mut first), policy.apply(x, &mut second)))
}

/// Augments a batch; row `i` uses substream `derive(seed, path ++ [i])`.
pub fn augment_batch(
    x: &EmbeddingMatrix,
    policy: &AugmentPolicy,
    seed: u64,
    path: &[u64],
) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    let mut a = Vec::with_capacity(x.as_slice().len());
    let mut b = Vec::with_capacity(x.as_slice().len());
    let mut key = path.to_vec();
    key.push(0);
    for (i, row) in x.iter_rows().enumerate() {
        *key.last_mut().expect("nonempty path") = i as u64;
        let mut rng = RngState::derive(seed, &key);
        let (v1, v2) = two_views(row, policy, &mut rng)?;
        a.extend(v1);
        b.extend(v2);
    }
    Ok((
        EmbeddingMatrix::new(x.rows(), x.cols(), a)?,
        EmbeddingMatrix::new(x.rows(), x.cols(), b)?,
    ))
}

/// Writes `label,f0,...,f{d-1}` with 17 significant digits per feature.
pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string()];
    header.extend((0..dataset.dim()).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for (row, label) in dataset.features.iter_rows().zip(&dataset.labels) {
        let mut record = vec![label.to_string()];
        record.extend(row.iter().map(|v| format!("{v:.16e}")));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_csv(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header = reader.headers()?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(parse_err(1, "empty file".into()));
    }
    if &header[0] != "label" || header.len() < 2 {
        return Err(parse_err(1, "header must be label,f0,...,f{d-1}".into()));
    }
    for (j, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{j}") {
            return Err(parse_err(
                1,
                format!("expected column f{j}, found {name:?}"),
            ));
        }
    }
    let dim = header.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 1 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", dim + 1, record.len()),
            ));
        }
        let label: i64 = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad label {:?}", &record[0])))?;
        if label < 0 {
            return Err(parse_err(line, "labels must be nonnegative".into()));
        }
        labels.push(label);
        for field in record.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("bad feature {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite feature {field:?}")));
            }
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }
    let features = EmbeddingMatrix::new(labels.len(), dim, data)?;
    Dataset::new(features, labels, split)
}

/// Binary layout mirroring the memory-bank dump with magic `PSMD`; the
/// capacity field equals the row count and labels are always present.
pub fn write_binary<W: Write>(dataset: &Dataset, mut w: W) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    let n = dataset.len() as u64;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&(dataset.dim() as u64).to_le_bytes())?;
    w.write_all(&[1u8])?;
    write_f64s(&mut w, dataset.features.as_slice())?;
    write_i64s(&mut w, &dataset.labels)?;
    Ok(())
}

pub fn read_binary<R: Read>(r: R, split: Split) -> Result<Dataset> {
    let mut r = ByteReader::new(r);
    let magic: [u8; 4] = read_array(&mut r)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let _capacity = r.u64()?;
    let count = r.u64()? as usize;
    let dim = r.u64()? as usize;
    if r.u8()? != 1 {
        return Err(Error::Format("dataset files must carry labels".into()));
    }
    let values = read_f64s(&mut r, count * dim)?;
    let labels = read_i64s(&mut r, count)?;
    r.expect_eof()?;
    Dataset::new(EmbeddingMatrix::new(count, dim, values)?, labels, split)
}

/// Loads `.csv` as CSV and anything else as the binary format.
pub fn load_dataset(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        load_csv(path, split)
    } else {
        let f = std::fs::File::open(path)?;
        read_binary(std::io::BufReader::new(f), split)
    }
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        save_csv(dataset, path)
    } else {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_binary(dataset, &mut w)?;
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cluster_shapes_and_determinism() {
        let d = gen_clusters(2, 10, 4, 3.0, 1).unwrap();
        assert_eq!(d.len(), 20);
        assert_eq!(d.dim(), 4);
        assert_eq!(d.num_classes(), 2);
        assert!(d.labels.iter().all(|&l| l == 0 || l == 1));
        assert_eq!(d, gen_clusters(2, 10, 4, 3.0, 1).unwrap());
        assert_ne!(d, gen_clusters(2, 10, 4, 3.0, 2).unwrap());
    }

    #[test]
    fn wide_separation_is_centroid_separable() {
        let spec = ClusterSpec {
            classes: 4,
            dim: 32,
            train_per_class: 100,
            test_per_class: 0,
            separation: 10.0,
            seed: 3,
        };
        let means = spec.means().unwrap();
        let (train, _) = spec.generate().unwrap();
        let mut correct = 0;
        for (x, &y) in train.features.iter_rows().zip(&train.labels) {
            let dist = |m: &[f64]| x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..4)
                .min_by(|&a, &b| dist(means.row(a)).total_cmp(&dist(means.row(b))))
                .unwrap();
            correct += usize::from(best as i64 == y);
        }
        assert!(correct as f64 / train.len() as f64 >= 0.99);
    }

    #[test]
    fn invalid_cluster_specs() {
        assert!(gen_clusters(1, 10, 4, 3.0, 1).is_err());
        assert!(gen_clusters(2, 10, 1, 3.0, 1).is_err());
        assert!(gen_clusters(2, 10, 4, 0.0, 1).is_err());
    }

    #[test]
    fn splits_share_means_but_not_samples() {
        let spec = ClusterSpec {
            classes: 3,
            dim: 5,
            train_per_class: 4,
            test_per_class: 4,
            separation: 2.0,
            seed: 9,
        };
        let (train, test) = spec.generate().unwrap();
        assert_eq!(train.split, Split::Train);
        assert_eq!(test.split, Split::Test);
        for a in train.features.iter_rows() {
            for b in test.features.iter_rows() {
                assert_ne!(a, b);
            }
        }
        let means = spec.means().unwrap();
        for m in means.iter_rows() {
            let n: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_policy_copies_input() {
        let x = [0.5, -1.0, 2.0];
        let mut rng = RngState::new(3);
        let (a, b) = two_views(&x, &AugmentPolicy::identity(), &mut rng).unwrap();
        assert_eq!(a, x);
        assert_eq!(b, x);
    }

    #[test]
    fn views_are_reproducible_and_distinct() {
        let x = [0.5, -1.0, 2.0, 0.1];
        let p = AugmentPolicy::default();
        let v = two_views(&x, &p, &mut RngState::new(3)).unwrap();
        assert_eq!(v, two_views(&x, &p, &mut RngState::new(3)).unwrap());
        assert_ne!(v.0, v.1);
        assert_eq!(v.0.len(), 4);
    }

    #[test]
    fn policy_validation() {
        let mut p = AugmentPolicy {
            dropout: 1.0,
            ..AugmentPolicy::default()
        };
        assert!(p.validate().is_err());
        p = AugmentPolicy {
            noise_std: -0.1,
            ..AugmentPolicy::default()
        };
        assert!(p.validate().is_err());
        p = AugmentPolicy {
            scale_lo: 1.5,
            scale_hi: 1.0,
            ..AugmentPolicy::default()
        };
        assert!(p.validate().is_err());
        p = AugmentPolicy {
            scale_lo: 0.0,
            ..AugmentPolicy::default()
        };
        assert!(two_views(&[1.0], &p, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = gen_clusters(3, 5, 4, 2.0, 7).unwrap();
        save_csv(&d, &path).unwrap();
        let back = load_csv(&path, Split::Train).unwrap();
        assert_eq!(back.labels, d.labels);
        for (a, b) in back.features.as_slice().iter().zip(d.features.as_slice()) {
            assert!((a - b).abs() <= 1e-15 * b.abs());
        }
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(load_csv(&empty, Split::Train).is_err());

        let ragged = dir.path().join("ragged.csv");
        std::fs::write(&ragged, "label,f0,f1\n0,1.0,2.0\n1,3.0\n").unwrap();
        let err = load_csv(&ragged, Split::Train).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other}"),
        }
        assert!(err_text(&ragged).contains("line 3"));

        let header_only = dir.path().join("h.csv");
        std::fs::write(&header_only, "label,f0\n").unwrap();
        assert!(load_csv(&header_only, Split::Train).is_err());

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "label,f0\n0,abc\n").unwrap();
        assert!(load_csv(&bad, Split::Train).is_err());
    }

    fn err_text(p: &Path) -> String {
        load_csv(p, Split::Train).unwrap_err().to_string()
    }

    #[test]
    fn binary_roundtrip_is_exact() {
        let d = gen_clusters(2, 3, 3, 2.0, 1).unwrap();
        let mut buf = Vec::new();
        write_binary(&d, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"PSMD");
        let back = read_binary(&buf[..], Split::Train).unwrap();
        assert_eq!(back, d);
        assert!(read_binary(&buf[..10], Split::Train).is_err());
    }
}
