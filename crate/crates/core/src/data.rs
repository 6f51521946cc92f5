//! Datasets of grayscale images with class labels, stored flat.
//!
//! The on-disk interchange format is the classic IDX pair (one `idx3`
//! file of `u8` images, one `idx1` file of labels), optionally
//! gzip-compressed — the format MNIST-style datasets ship in.  Pixels are
//! mapped to `[0, 1]` by dividing by 255; images are flattened row-major
//! into feature vectors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::scalar::Scalar;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// A labeled dataset with features normalized to `[0, 1]`.
///
/// Features are stored as one contiguous row-major block; sample `i`
/// occupies `features[i * num_features .. (i + 1) * num_features]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    features: Vec<S>,
    labels: Vec<u8>,
    num_features: usize,
    num_classes: usize,
}

impl<S: Scalar> Dataset<S> {
    /// Build a dataset from parts, validating the stated invariants:
    /// features in `[0, 1]`, labels below the class count, matching
    /// lengths.
    pub fn from_parts(
        features: Vec<S>,
        labels: Vec<u8>,
        num_features: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if num_features == 0 {
            return Err(Error::Consistency("dataset has zero features per sample".into()));
        }
        if features.len() != labels.len() * num_features {
            return Err(Error::Consistency(format!(
                "{} feature values do not tile {} samples of {} features",
                features.len(),
                labels.len(),
                num_features
            )));
        }
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::Consistency(format!(
                "class count {num_classes} out of range"
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| (l as usize) >= num_classes) {
            return Err(Error::Consistency(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if !features
            .iter()
            .all(|f| *f >= S::zero() && *f <= S::one())
        {
            return Err(Error::Consistency(
                "feature value outside [0, 1]".into(),
            ));
        }
        Ok(Dataset {
            features,
            labels,
            num_features,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features_of(&self, i: usize) -> &[S] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// First `n` samples (everything if `n` exceeds the length).  Used to
    /// cut runs down to desk scale without touching sampling order.
    pub fn limited(&self, n: usize) -> Dataset<S> {
        let n = n.min(self.len());
        Dataset {
            features: self.features[..n * self.num_features].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_features: self.num_features,
            num_classes: self.num_classes,
        }
    }

    /// Keep only the feature positions in `keep` (in the given order).
    pub fn select_features(&self, keep: &[usize]) -> Result<Dataset<S>> {
        if keep.is_empty() {
            return Err(Error::Domain("empty feature selection".into()));
        }
        if let Some(&bad) = keep.iter().find(|&&k| k >= self.num_features) {
            return Err(Error::Domain(format!(
                "feature index {bad} out of range for {} features",
                self.num_features
            )));
        }
        let mut features = Vec::with_capacity(self.len() * keep.len());
        for i in 0..self.len() {
            let row = self.features_of(i);
            features.extend(keep.iter().map(|&k| row[k]));
        }
        Ok(Dataset {
            features,
            labels: self.labels.clone(),
            num_features: keep.len(),
            num_classes: self.num_classes,
        })
    }

    /// Split into two disjoint parts; the first receives
    /// `round(fraction * len)` samples.  Assignment is a seeded shuffle,
    /// so every sample lands in exactly one side and the same
    /// `(fraction, seed)` always produces the same split.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset<S>, Dataset<S>)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Domain(format!(
                "split fraction {fraction} outside [0, 1]"
            )));
        }
        let n = self.len();
        let n_first = (fraction * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = SeedTree::new(seed).stream("split");
        order.shuffle(&mut rng);
        let gather = |idx: &[usize]| -> Dataset<S> {
            let mut features = Vec::with_capacity(idx.len() * self.num_features);
            let mut labels = Vec::with_capacity(idx.len());
            for &i in idx {
                features.extend_from_slice(self.features_of(i));
                labels.push(self.labels[i]);
            }
            Dataset {
                features,
                labels,
                num_features: self.num_features,
                num_classes: self.num_classes,
            }
        };
        Ok((gather(&order[..n_first]), gather(&order[n_first..])))
    }
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    let buffered = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(buffered)))
    } else {
        Ok(Box::new(buffered))
    }
}

fn read_exact_bytes(r: &mut dyn Read, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("while reading {what}: {e}"),
        ))
    })?;
    Ok(buf)
}

/// Load an IDX image/label pair into a dataset.
///
/// Paths ending in `.gz` are transparently decompressed.  The class count
/// is the largest label plus one.
pub fn load_idx<S: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<S>> {
    // Images: magic, count, rows, cols, then count*rows*cols bytes.
    let mut ir = open_maybe_gz(images_path)?;
    let magic = ir.read_u32::<BigEndian>()?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad image magic 0x{magic:08x} (want 0x{IMAGE_MAGIC:08x})",
            images_path.display()
        )));
    }
    let count = ir.read_u32::<BigEndian>()? as usize;
    let rows = ir.read_u32::<BigEndian>()? as usize;
    let cols = ir.read_u32::<BigEndian>()? as usize;
    let num_features = rows * cols;
    if num_features == 0 {
        return Err(Error::Format(format!(
            "{}: zero-sized images ({rows}x{cols})",
            images_path.display()
        )));
    }
    let pixels = read_exact_bytes(&mut ir, count * num_features, "image payload")?;

    // Labels: magic, count, then count bytes.
    let mut lr = open_maybe_gz(labels_path)?;
    let lmagic = lr.read_u32::<BigEndian>()?;
    if lmagic != LABEL_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad label magic 0x{lmagic:08x} (want 0x{LABEL_MAGIC:08x})",
            labels_path.display()
        )));
    }
    let lcount = lr.read_u32::<BigEndian>()? as usize;
    if lcount != count {
        return Err(Error::Consistency(format!(
            "{count} images but {lcount} labels",
        )));
    }
    let labels = read_exact_bytes(&mut lr, lcount, "label payload")?;

    let inv = S::from_f64_c(1.0 / 255.0);
    let features: Vec<S> = pixels
        .iter()
        .map(|&p| S::from_usize(p as usize).unwrap_or_else(S::zero) * inv)
        .collect();
    let num_classes = labels.iter().copied().max().map_or(1, |m| m as usize + 1);
    Dataset::from_parts(features, labels, num_features, num_classes)
}

/// Write an IDX image/label pair (uncompressed) from raw parts.
///
/// This is the inverse of [`load_idx`] at the byte level and exists for
/// round-trip tests and synthetic fixtures.
pub fn save_idx(
    images_path: &Path,
    labels_path: &Path,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    labels: &[u8],
) -> Result<()> {
    if rows * cols == 0 {
        return Err(Error::Domain("zero-sized images".into()));
    }
    if pixels.len() != labels.len() * rows * cols {
        return Err(Error::Consistency(format!(
            "{} pixels do not tile {} samples of {rows}x{cols}",
            pixels.len(),
            labels.len()
        )));
    }
    let mut iw = BufWriter::new(File::create(images_path)?);
    iw.write_u32::<BigEndian>(IMAGE_MAGIC)?;
    iw.write_u32::<BigEndian>(labels.len() as u32)?;
    iw.write_u32::<BigEndian>(rows as u32)?;
    iw.write_u32::<BigEndian>(cols as u32)?;
    iw.write_all(pixels)?;
    iw.flush()?;

    let mut lw = BufWriter::new(File::create(labels_path)?);
    lw.write_u32::<BigEndian>(LABEL_MAGIC)?;
    lw.write_u32::<BigEndian>(labels.len() as u32)?;
    lw.write_all(labels)?;
    lw.flush()?;
    Ok(())
}

/// Recover the original pixel byte of a normalized feature value.
pub fn feature_to_pixel<S: Scalar>(f: S) -> u8 {
    (f.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Deterministic feature-subset choice for square images.
///
/// For a perfect-square request `m = k*k` on a square image, the central
/// `k x k` patch is kept (most informative pixels in centered digit
/// data); otherwise positions are taken at a uniform stride.  Both
/// choices are pure functions of `(num_features, m)`, so separate
/// invocations (training and later analysis) agree on the selection.
pub fn subset_indices(num_features: usize, m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > num_features {
        return Err(Error::Domain(format!(
            "subset size {m} out of range for {num_features} features"
        )));
    }
    let side = (num_features as f64).sqrt().round() as usize;
    let k = (m as f64).sqrt().round() as usize;
    if side * side == num_features && k * k == m {
        let start = (side - k) / 2;
        let mut keep = Vec::with_capacity(m);
        for r in start..start + k {
            for c in start..start + k {
                keep.push(r * side + c);
            }
        }
        return Ok(keep);
    }
    Ok((0..m).map(|i| i * num_features / m).collect())
}

/// Shuffled mini-batch scheduler.
///
/// Holds the batch size and a per-run shuffle seed; each epoch asks for a
/// fresh permutation derived from `(seed, epoch)`, so epoch `e`'s batch
/// sequence does not depend on how many epochs ran before it.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    num_samples: usize,
    batch_size: usize,
    seeds: SeedTree,
}

/// The batches of one epoch, in order.
#[derive(Debug, Clone)]
pub struct EpochBatches {
    order: Vec<u32>,
    batch_size: usize,
}

impl BatchIterator {
    pub fn new(num_samples: usize, batch_size: usize, shuffle_seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Domain("batch size must be positive".into()));
        }
        Ok(BatchIterator {
            num_samples,
            batch_size,
            seeds: SeedTree::new(shuffle_seed),
        })
    }

    /// The shuffled batch plan for one epoch (0-based).  The final batch
    /// may be short when the batch size does not divide the sample count.
    pub fn epoch(&self, epoch: usize) -> EpochBatches {
        let mut order: Vec<u32> = (0..self.num_samples as u32).collect();
        let mut rng: ChaCha8Rng = self.seeds.stream_indexed("shuffle", &[epoch as u64]);
        order.shuffle(&mut rng);
        EpochBatches {
            order,
            batch_size: self.batch_size,
        }
    }
}

impl EpochBatches {
    pub fn iter(&self) -> impl Iterator<Item = &[u32]> {
        self.order.chunks(self.batch_size)
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn synth_pair(n: usize, rows: usize, cols: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
        // Cheap deterministic pseudo-random bytes; no statistical needs here.
        let mut state = seed.wrapping_mul(0x2545_f491_4f6c_dd1d) | 1;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        let pixels = (0..n * rows * cols).map(|_| (next() >> 24) as u8).collect();
        let labels = (0..n).map(|_| (next() % 10) as u8).collect();
        (pixels, labels)
    }

    #[test]
    fn idx_round_trip_is_byte_identical() {
        let dir = tempdir().unwrap();
        let (pixels, labels) = synth_pair(13, 5, 4, 99);
        let ip = dir.path().join("img.idx3-ubyte");
        let lp = dir.path().join("lab.idx1-ubyte");
        save_idx(&ip, &lp, 5, 4, &pixels, &labels).unwrap();

        let ds: Dataset<f64> = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 13);
        assert_eq!(ds.num_features(), 20);

        // Serialize the loaded dataset again and compare files.
        let pixels2: Vec<u8> = (0..ds.len())
            .flat_map(|i| ds.features_of(i).iter().map(|&f| feature_to_pixel(f)))
            .collect();
        let ip2 = dir.path().join("img2.idx3-ubyte");
        let lp2 = dir.path().join("lab2.idx1-ubyte");
        save_idx(&ip2, &lp2, 5, 4, &pixels2, ds.labels()).unwrap();
        assert_eq!(std::fs::read(&ip).unwrap(), std::fs::read(&ip2).unwrap());
        assert_eq!(std::fs::read(&lp).unwrap(), std::fs::read(&lp2).unwrap());
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempdir().unwrap();
        let ip = dir.path().join("img.idx3-ubyte");
        let lp = dir.path().join("lab.idx1-ubyte");
        let (pixels, labels) = synth_pair(3, 2, 2, 1);
        save_idx(&ip, &lp, 2, 2, &pixels, &labels).unwrap();
        // Corrupt the image magic.
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes[3] = 0x04;
        std::fs::write(&ip, bytes).unwrap();
        assert!(matches!(
            load_idx::<f64>(&ip, &lp),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn count_mismatch_is_a_consistency_error() {
        let dir = tempdir().unwrap();
        let (pixels, labels) = synth_pair(4, 2, 2, 2);
        let ip = dir.path().join("img.idx3-ubyte");
        let lp = dir.path().join("lab.idx1-ubyte");
        save_idx(&ip, &lp, 2, 2, &pixels, &labels).unwrap();
        let (p2, l2) = synth_pair(5, 2, 2, 3);
        let lp2 = dir.path().join("lab2.idx1-ubyte");
        let ip2 = dir.path().join("img2.idx3-ubyte");
        save_idx(&ip2, &lp2, 2, 2, &p2, &l2).unwrap();
        assert!(matches!(
            load_idx::<f64>(&ip, &lp2),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn truncated_payload_is_an_io_error() {
        let dir = tempdir().unwrap();
        let (pixels, labels) = synth_pair(4, 3, 3, 4);
        let ip = dir.path().join("img.idx3-ubyte");
        let lp = dir.path().join("lab.idx1-ubyte");
        save_idx(&ip, &lp, 3, 3, &pixels, &labels).unwrap();
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_idx::<f64>(&ip, &lp), Err(Error::Io(_))));
    }

    #[test]
    fn features_are_normalized() {
        let dir = tempdir().unwrap();
        let pixels = vec![0u8, 255, 128, 64];
        let labels = vec![1u8];
        let ip = dir.path().join("img.idx3-ubyte");
        let lp = dir.path().join("lab.idx1-ubyte");
        save_idx(&ip, &lp, 2, 2, &pixels, &labels).unwrap();
        let ds: Dataset<f64> = load_idx(&ip, &lp).unwrap();
        let f = ds.features_of(0);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 1.0);
        assert!(f.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn split_partitions_without_loss() {
        let features: Vec<f64> = (0..100).map(|i| (i % 7) as f64 / 10.0).collect();
        let labels: Vec<u8> = (0..50).map(|i| (i % 3) as u8).collect();
        let ds = Dataset::from_parts(features, labels, 2, 3).unwrap();
        let (a, b) = ds.split(0.8, 11).unwrap();
        assert_eq!(a.len(), 40);
        assert_eq!(b.len(), 10);
        // Same seed, same split.
        let (a2, _) = ds.split(0.8, 11).unwrap();
        assert_eq!(a, a2);
        // Multiset of rows is preserved.
        let mut rows: Vec<Vec<u64>> = (0..a.len())
            .map(|i| a.features_of(i).iter().map(|f| f.to_bits()).collect())
            .chain((0..b.len()).map(|i| b.features_of(i).iter().map(|f| f.to_bits()).collect()))
            .collect();
        let mut orig: Vec<Vec<u64>> = (0..ds.len())
            .map(|i| ds.features_of(i).iter().map(|f| f.to_bits()).collect())
            .collect();
        rows.sort();
        orig.sort();
        assert_eq!(rows, orig);
    }

    #[test]
    fn batches_cover_each_sample_once() {
        let it = BatchIterator::new(103, 10, 5).unwrap();
        for epoch in 0..3 {
            let plan = it.epoch(epoch);
            assert_eq!(plan.num_batches(), 11);
            let mut seen: Vec<u32> = plan.iter().flatten().copied().collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..103).collect::<Vec<u32>>());
        }
        // Different epochs shuffle differently; the same epoch twice is stable.
        let p1: Vec<u32> = it.epoch(0).iter().flatten().copied().collect();
        let p2: Vec<u32> = it.epoch(1).iter().flatten().copied().collect();
        let p1b: Vec<u32> = it.epoch(0).iter().flatten().copied().collect();
        assert_ne!(p1, p2);
        assert_eq!(p1, p1b);
    }

    #[test]
    fn central_patch_subset_for_square_sizes() {
        // 6x6 image, 2x2 subset: rows/cols 2..4 of a 6-wide grid.
        let keep = subset_indices(36, 4).unwrap();
        assert_eq!(keep, vec![14, 15, 20, 21]);
        // Non-square request falls back to uniform stride.
        let keep = subset_indices(36, 3).unwrap();
        assert_eq!(keep, vec![0, 12, 24]);
        assert!(subset_indices(36, 0).is_err());
        assert!(subset_indices(36, 37).is_err());
    }

    #[test]
    fn out_of_range_feature_rejected() {
        let res = Dataset::from_parts(vec![0.5f64, 1.5], vec![0], 2, 1);
        assert!(matches!(res, Err(Error::Consistency(_))));
    }
}
