//! Datasets, vertical feature partitioning and aligned batch order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::nn::Tensor;
use crate::transport::PartyId;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Pairwise distance between class means used by [`synth_blobs`].
pub const DEFAULT_SEPARATION: f64 = 5.0;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: String, expected: u32, found: u32 },
    #[error("{path}: truncated, header promises {expected} bytes of records but {actual} present")]
    Truncated { path: String, expected: usize, actual: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("cannot split {features} feature columns across {parties} parties")]
    TooFewFeatures { features: usize, parties: usize },
    #[error("csv: {0}")]
    Csv(String),
    #[error("label {label} at row {row} is not a class index below {classes}")]
    InvalidLabel { row: usize, label: String, classes: usize },
    #[error("dataset has no rows")]
    Empty,
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// N×F feature matrix.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Pixels per image row when the columns are a flattened image.
    pub row_width: Option<usize>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, row_width: Option<usize>) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(DataError::Invalid(format!("features must be a matrix, got shape {:?}", features.shape())));
        }
        if features.rows() != labels.len() {
            return Err(DataError::CountMismatch {
                images: features.rows(),
                labels: labels.len(),
            });
        }
        if let Some((row, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DataError::InvalidLabel {
                row,
                label: l.to_string(),
                classes,
            });
        }
        if !features.is_finite() {
            return Err(DataError::Invalid("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            classes,
            row_width,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.row_width()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            row_width: self.row_width,
        }
    }

    /// First `n` rows and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// First `n` rows.
    pub fn take(&self, n: usize) -> Self {
        self.split_at(n).0
    }
}

/// One party's columns of every sample, in the shared row order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureShard {
    pub owner: PartyId,
    pub columns: Range<usize>,
    pub features: Tensor,
    /// Set when the slice is whole image rows.
    pub row_width: Option<usize>,
}

impl FeatureShard {
    pub fn width(&self) -> usize {
        self.columns.len()
    }
}

/// Column ranges for a contiguous split; the last party absorbs the remainder.
pub fn split_ranges(features: usize, parties: usize) -> Result<Vec<Range<usize>>> {
    if parties == 0 || features < parties {
        return Err(DataError::TooFewFeatures { features, parties });
    }
    let w = features / parties;
    Ok((0..parties)
        .map(|k| {
            let lo = k * w;
            let hi = if k + 1 == parties { features } else { lo + w };
            lo..hi
        })
        .collect())
}

/// Splits columns across `parties` parties; party 0 is the active party and
/// keeps the labels, which stay on the dataset.
pub fn vertical_split(dataset: &Dataset, parties: usize) -> Result<Vec<FeatureShard>> {
    let ranges = split_ranges(dataset.width(), parties)?;
    let n = dataset.len();
    let f = dataset.width();
    let src = dataset.features.data();
    Ok(ranges
        .into_iter()
        .enumerate()
        .map(|(k, cols)| {
            let mut data = Vec::with_capacity(n * cols.len());
            for i in 0..n {
                data.extend_from_slice(&src[i * f + cols.start..i * f + cols.end]);
            }
            let row_width = dataset
                .row_width
                .filter(|&rw| cols.start % rw == 0 && cols.len() % rw == 0);
            FeatureShard {
                owner: PartyId(k as u16),
                features: Tensor::new(vec![n, cols.len()], data).expect("shape by construction"),
                columns: cols,
                row_width,
            }
        })
        .collect())
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    Ok(buf)
}

fn check_header(path: &Path, bytes: &[u8], magic: u32, header: usize) -> Result<()> {
    let name = path.display().to_string();
    if bytes.len() < header {
        return Err(DataError::Truncated {
            path: name,
            expected: header,
            actual: bytes.len(),
        });
    }
    let found = read_u32(bytes, 0);
    if found != magic {
        return Err(DataError::BadMagic {
            path: name,
            expected: magic,
            found,
        });
    }
    Ok(())
}

/// Reads an IDX image/label pair. Pixels are scaled to [0, 1].
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let ib = read_all(images)?;
    check_header(images, &ib, IDX_IMAGES_MAGIC, 16)?;
    let (count, rows, cols) = (read_u32(&ib, 4) as usize, read_u32(&ib, 8) as usize, read_u32(&ib, 12) as usize);
    let width = rows * cols;
    let need = count * width;
    if ib.len() - 16 < need {
        return Err(DataError::Truncated {
            path: images.display().to_string(),
            expected: need,
            actual: ib.len() - 16,
        });
    }
    let lb = read_all(labels)?;
    check_header(labels, &lb, IDX_LABELS_MAGIC, 8)?;
    let lcount = read_u32(&lb, 4) as usize;
    if lb.len() - 8 < lcount {
        return Err(DataError::Truncated {
            path: labels.display().to_string(),
            expected: lcount,
            actual: lb.len() - 8,
        });
    }
    if lcount != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: lcount,
        });
    }
    if count == 0 {
        return Err(DataError::Empty);
    }
    let pixels: Vec<f64> = ib[16..16 + need].iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = lb[8..8 + count].iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Tensor::new(vec![count, width], pixels).expect("shape"), labels, classes, Some(cols))
}

/// Writes a dataset as an IDX pair, quantizing features to bytes. Rows are
/// laid out with `row_width` columns (or as a single row when unset).
pub fn write_idx(dataset: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let f = dataset.width();
    let cols = dataset.row_width.filter(|&w| w > 0 && f % w == 0).unwrap_or(f);
    let mut w = BufWriter::new(File::create(images)?);
    w.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    for d in [dataset.len(), f / cols, cols] {
        w.write_all(&(d as u32).to_be_bytes())?;
    }
    let bytes: Vec<u8> = dataset
        .features
        .data()
        .iter()
        .map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(labels)?);
    w.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(dataset.len() as u32).to_be_bytes())?;
    let ls: Vec<u8> = dataset.labels.iter().map(|&l| l as u8).collect();
    w.write_all(&ls)?;
    w.flush()?;
    Ok(())
}

/// Reads a CSV with the class label in the last column. A first row that
/// does not parse as numbers is taken as a header.
pub fn load_csv(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::Csv(e.to_string()))?;
    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    let mut width = None;
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| DataError::Csv(e.to_string()))?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if row == 0 => continue,
            Err(e) => return Err(DataError::Csv(format!("row {}: {e}", row + 1))),
        };
        if values.len() < 2 {
            return Err(DataError::Csv(format!("row {}: need features and a label", row + 1)));
        }
        let w = *width.get_or_insert(values.len() - 1);
        if values.len() - 1 != w {
            return Err(DataError::Csv(format!(
                "row {}: {} feature columns, expected {w}",
                row + 1,
                values.len() - 1
            )));
        }
        let (label, feats) = values.split_last().expect("non-empty");
        features.extend_from_slice(feats);
        raw_labels.push((row, *label));
    }
    let width = width.ok_or(DataError::Empty)?;
    let mut labels = Vec::with_capacity(raw_labels.len());
    for &(row, l) in &raw_labels {
        if l < 0.0 || l.fract() != 0.0 || !l.is_finite() {
            return Err(DataError::InvalidLabel {
                row,
                label: l.to_string(),
                classes: classes.unwrap_or(0),
            });
        }
        labels.push(l as usize);
    }
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, width], features).expect("shape"), labels, classes, None)
}

/// Writes features and a trailing label column, with a header row.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DataError::Csv(e.to_string()))?;
    let mut header: Vec<String> = (0..dataset.width()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| DataError::Csv(e.to_string()))?;
    for i in 0..dataset.len() {
        let mut rec: Vec<String> = dataset.features.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(dataset.labels[i].to_string());
        w.write_record(&rec).map_err(|e| DataError::Csv(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobConfig {
    pub samples: usize,
    pub classes: usize,
    pub dims: usize,
    /// Per-coordinate variance.
    pub spread: f64,
    /// Distance between any two class means.
    pub separation: f64,
    pub seed: u64,
}

/// Gaussian blobs whose means are the vertices of a regular simplex,
/// rotated into `dims` dimensions by a random orthonormal basis so every
/// coordinate carries some class signal. Row `i` has class `i % classes`.
pub fn synth_blobs(samples: usize, classes: usize, dims: usize, spread: f64, seed: u64) -> Result<Dataset> {
    synth_blobs_with(&BlobConfig {
        samples,
        classes,
        dims,
        spread,
        separation: DEFAULT_SEPARATION,
        seed,
    })
}

pub fn synth_blobs_with(cfg: &BlobConfig) -> Result<Dataset> {
    let (m, f) = (cfg.classes, cfg.dims);
    if m < 1 || f < 1 {
        return Err(DataError::Invalid("need at least one class and one dimension".into()));
    }
    if cfg.samples < m {
        return Err(DataError::Invalid(format!("{} samples cannot cover {m} classes", cfg.samples)));
    }
    if !(cfg.spread >= 0.0 && cfg.spread.is_finite()) {
        return Err(DataError::Invalid(format!("spread {} must be a finite non-negative variance", cfg.spread)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Simplex vertices e_c - 1/M live in R^M with pairwise distance sqrt(2).
    // Map R^M into R^F through orthonormal vectors (or a projection when F < M).
    let basis = random_orthonormal(&mut rng, m.min(f), f);
    let scale = cfg.separation / 2f64.sqrt();
    let mut means = vec![0.0; m * f];
    for c in 0..m {
        for (a, axis) in basis.iter().enumerate() {
            let coord = scale * (if a == c { 1.0 } else { 0.0 } - 1.0 / m as f64);
            for j in 0..f {
                means[c * f + j] += coord * axis[j];
            }
        }
    }
    let sd = cfg.spread.sqrt();
    let mut data = Vec::with_capacity(cfg.samples * f);
    let mut labels = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let c = i % m;
        for j in 0..f {
            let z: f64 = rng.sample(StandardNormal);
            data.push(means[c * f + j] + sd * z);
        }
        labels.push(c);
    }
    Dataset::new(Tensor::new(vec![cfg.samples, f], data).expect("shape"), labels, m, None)
}

/// `count` orthonormal vectors in R^dims (Gram-Schmidt on Gaussian draws).
fn random_orthonormal<R: Rng>(rng: &mut R, count: usize, dims: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dims).map(|_| rng.sample(StandardNormal)).collect();
        for u in &out {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            out.push(v);
        }
    }
    out
}

/// Sample order for one epoch: a permutation of `0..n` fixed by
/// `(seed, epoch)`, cut into batches of `batch_size` (last one short).
pub fn batch_iter(n: usize, batch_size: usize, epoch: u64, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn widths(f: usize, c: usize) -> Vec<usize> {
        split_ranges(f, c).unwrap().iter().map(|r| r.len()).collect()
    }

    #[test]
    fn split_widths() {
        assert_eq!(widths(8, 4), vec![2, 2, 2, 2]);
        assert_eq!(widths(10, 4), vec![2, 2, 2, 4]);
        assert_eq!(widths(784, 4), vec![196; 4]);
        let r = split_ranges(784, 4).unwrap();
        assert!(r[1].contains(&200));
        assert!(matches!(split_ranges(3, 4), Err(DataError::TooFewFeatures { .. })));
    }

    #[test]
    fn batch_arithmetic() {
        let b = batch_iter(1000, 128, 0, 1);
        assert_eq!(b.len(), 8);
        assert_eq!(b.last().unwrap().len(), 104);
        assert_eq!(batches_per_epoch(1000, 128), 8);
        let one = batch_iter(5, 10, 3, 1);
        assert_eq!(one.len(), 1);
        let mut s = one[0].clone();
        s.sort();
        assert_eq!(s, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn epochs_reshuffle_deterministically() {
        assert_eq!(batch_iter(50, 7, 2, 9), batch_iter(50, 7, 2, 9));
        assert_ne!(batch_iter(50, 50, 0, 9), batch_iter(50, 50, 1, 9));
    }

    #[test]
    fn zero_spread_rows_repeat_per_class() {
        let d = synth_blobs(30, 3, 5, 0.0, 4).unwrap();
        for i in 3..30 {
            assert_eq!(d.features.row(i), d.features.row(i % 3));
        }
        assert_ne!(d.features.row(0), d.features.row(1));
    }

    #[test]
    fn class_means_are_equidistant() {
        let d = synth_blobs(4, 4, 9, 0.0, 11).unwrap();
        for a in 0..4 {
            for b in a + 1..4 {
                let dist: f64 = d
                    .features
                    .row(a)
                    .iter()
                    .zip(d.features.row(b))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                assert!((dist - DEFAULT_SEPARATION).abs() < 1e-9, "{dist}");
            }
        }
    }

    #[test]
    fn dataset_validation() {
        let t = Tensor::zeros(vec![2, 3]);
        assert!(Dataset::new(t.clone(), vec![0], 2, None).is_err());
        assert!(Dataset::new(t.clone(), vec![0, 2], 2, None).is_err());
        assert!(Dataset::new(t, vec![0, 1], 2, None).is_ok());
    }
}
