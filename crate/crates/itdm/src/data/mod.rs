//! Datasets: IDX ingestion, synthetic blobs, subsetting, and batching.

mod idx;
mod sampler;

pub use idx::{load_idx, IMAGES_MAGIC, LABELS_MAGIC};
pub use sampler::DualBatchSampler;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// An in-memory labeled dataset. Inputs are `[n, ...]` with pixel data
/// normalized to `[0, 1]` at load time.
#[derive(Debug, Clone)]
pub struct Dataset {
    name: String,
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        inputs: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs vs {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if inputs.rows() == 0 {
            return Err(Error::EmptyInput("dataset"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            name: name.into(),
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-sample shape, i.e. the input shape without the leading `n`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Materialize the samples at `idx` into a batch.
    pub fn gather(&self, idx: &[usize]) -> Result<Batch> {
        let inputs = self.inputs.gather_rows(idx)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok(Batch { inputs, labels })
    }

    /// Deterministic random subset of `n` samples, drawn by seed.
    pub fn subset_seeded(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "subset size {n} out of range 1..={}",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = Rng::new(seed);
        rng.shuffle(&mut order);
        order.truncate(n);
        let batch = self.gather(&order)?;
        Dataset::new(
            self.name.clone(),
            batch.inputs,
            batch.labels,
            self.num_classes,
        )
    }

    /// Serialize back to the IDX byte format (3-D image datasets only).
    pub fn to_idx_bytes(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        idx::to_idx_bytes(self)
    }
}

/// One mini-batch of inputs and labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Gaussian blobs around class means placed on scaled one-hot corners at
/// mutual distance `separation`. With `separation == 0` all classes share the
/// origin and carry no signal at all. Labels come out class-major.
pub fn synthetic_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    if num_classes < 2 || per_class == 0 || dim == 0 {
        return Err(Error::InvalidArgument(
            "blobs need >= 2 classes, >= 1 sample per class, dim >= 1".into(),
        ));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "separation must be finite and >= 0, got {separation}"
        )));
    }
    if separation > 0.0 && dim < num_classes {
        return Err(Error::InvalidArgument(format!(
            "{num_classes} separated classes need dim >= {num_classes}, got {dim}"
        )));
    }
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    // |c*(e_i - e_j)| = c*sqrt(2), so c = separation/sqrt(2) puts every pair
    // of means exactly `separation` apart.
    let corner = separation / std::f64::consts::SQRT_2;
    for class in 0..num_classes {
        for _ in 0..per_class {
            for c in 0..dim {
                let mean = if c == class { corner } else { 0.0 };
                data.push(mean + rng.normal());
            }
            labels.push(class);
        }
    }
    Dataset::new(
        "blobs",
        Tensor::new(vec![n, dim], data)?,
        labels,
        num_classes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Build a valid 2-image 2x2 IDX pair by the byte-format rules.
    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&[0, 51, 102, 255, 10, 20, 30, 40]);
        let mut labels = Vec::new();
        labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[3, 7]);
        (images, labels)
    }

    fn load_fixture(images: &[u8], labels: &[u8]) -> Result<Dataset> {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("images");
        let lp = dir.path().join("labels");
        std::fs::write(&ip, images).unwrap();
        std::fs::write(&lp, labels).unwrap();
        load_idx(&ip, &lp)
    }

    #[test]
    fn parses_hand_built_fixture_exactly() {
        let (images, labels) = fixture();
        let ds = load_fixture(&images, &labels).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.sample_shape(), &[2, 2]);
        assert_eq!(ds.num_classes(), 8);
        assert_eq!(ds.labels(), &[3, 7]);
        let expected: Vec<f64> = [0u8, 51, 102, 255, 10, 20, 30, 40]
            .iter()
            .map(|&b| f64::from(b) / 255.0)
            .collect();
        assert_eq!(ds.inputs().data(), &expected[..]);
    }

    #[test]
    fn rejects_bad_magics_distinctly() {
        let (mut images, labels) = fixture();
        images[3] = 0x99;
        let err = load_fixture(&images, &labels).unwrap_err();
        assert!(matches!(err, Error::IdxBadMagic { expected, .. } if expected == IMAGES_MAGIC));

        let (images, mut labels) = fixture();
        labels[3] = 0x99;
        let err = load_fixture(&images, &labels).unwrap_err();
        assert!(matches!(err, Error::IdxBadMagic { expected, .. } if expected == LABELS_MAGIC));
    }

    #[test]
    fn rejects_truncated_files() {
        let (mut images, labels) = fixture();
        images.truncate(images.len() - 3);
        let err = load_fixture(&images, &labels).unwrap_err();
        assert!(matches!(err, Error::IdxTruncated { .. }));

        let (images, mut labels) = fixture();
        labels.truncate(9);
        let err = load_fixture(&images, &labels).unwrap_err();
        assert!(matches!(err, Error::IdxTruncated { .. }));
    }

    #[test]
    fn rejects_count_mismatch() {
        let (images, _) = fixture();
        let mut labels = Vec::new();
        labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&3u32.to_be_bytes());
        labels.extend_from_slice(&[1, 2, 3]);
        let err = load_fixture(&images, &labels).unwrap_err();
        assert!(matches!(
            err,
            Error::IdxCountMismatch {
                images: 2,
                labels: 3
            }
        ));
    }

    #[test]
    fn idx_round_trip_is_identical() {
        let (images, labels) = fixture();
        let ds = load_fixture(&images, &labels).unwrap();
        let (out_images, out_labels) = ds.to_idx_bytes().unwrap();
        assert_eq!(out_images, images);
        assert_eq!(out_labels, labels);
        let reloaded = load_fixture(&out_images, &out_labels).unwrap();
        assert_eq!(reloaded.inputs().data(), ds.inputs().data());
        assert_eq!(reloaded.labels(), ds.labels());
    }

    /// Nearest-class-mean accuracy; linear decision rule for equal isotropic
    /// class covariances.
    fn nearest_mean_accuracy(ds: &Dataset) -> f64 {
        let d = ds.sample_shape()[0];
        let k = ds.num_classes();
        let mut means = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &label) in ds.labels().iter().enumerate() {
            counts[label] += 1;
            for c in 0..d {
                means[label * d + c] += ds.inputs().data()[i * d + c];
            }
        }
        for class in 0..k {
            for c in 0..d {
                means[class * d + c] /= counts[class] as f64;
            }
        }
        let mut hits = 0;
        for (i, &label) in ds.labels().iter().enumerate() {
            let x = &ds.inputs().data()[i * d..(i + 1) * d];
            let mut best = 0;
            let mut best_dist = f64::INFINITY;
            for class in 0..k {
                let mu = &means[class * d..(class + 1) * d];
                let dist: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best_dist {
                    best_dist = dist;
                    best = class;
                }
            }
            if best == label {
                hits += 1;
            }
        }
        hits as f64 / ds.len() as f64
    }

    #[test]
    fn separated_blobs_are_linearly_separable() {
        let mut rng = Rng::new(90);
        let ds = synthetic_blobs(2, 400, 2, 10.0, &mut rng).unwrap();
        assert!(nearest_mean_accuracy(&ds) > 0.99);
    }

    #[test]
    fn blobs_replay_identically_per_seed() {
        let mut a = Rng::new(91);
        let mut b = Rng::new(91);
        let d1 = synthetic_blobs(3, 50, 4, 6.0, &mut a).unwrap();
        let d2 = synthetic_blobs(3, 50, 4, 6.0, &mut b).unwrap();
        assert_eq!(d1.inputs().data(), d2.inputs().data());
        assert_eq!(d1.labels(), d2.labels());
    }

    #[test]
    fn zero_separation_blobs_are_indistinguishable() {
        let mut rng = Rng::new(92);
        let ds = synthetic_blobs(2, 2000, 2, 0.0, &mut rng).unwrap();
        let acc = nearest_mean_accuracy(&ds);
        assert!((acc - 0.5).abs() < 0.05, "accuracy {acc}");
    }

    #[test]
    fn blobs_validate_arguments() {
        let mut rng = Rng::new(93);
        assert!(synthetic_blobs(1, 10, 2, 1.0, &mut rng).is_err());
        assert!(synthetic_blobs(2, 0, 2, 1.0, &mut rng).is_err());
        assert!(synthetic_blobs(5, 10, 3, 1.0, &mut rng).is_err());
        assert!(synthetic_blobs(5, 10, 3, 0.0, &mut rng).is_ok());
    }

    #[test]
    fn subset_is_seeded_and_label_consistent() {
        let mut rng = Rng::new(94);
        let ds = synthetic_blobs(3, 100, 4, 6.0, &mut rng).unwrap();
        let s1 = ds.subset_seeded(50, 7).unwrap();
        let s2 = ds.subset_seeded(50, 7).unwrap();
        assert_eq!(s1.inputs().data(), s2.inputs().data());
        assert_eq!(s1.labels(), s2.labels());
        assert_eq!(s1.len(), 50);
        let s3 = ds.subset_seeded(50, 8).unwrap();
        assert_ne!(s1.inputs().data(), s3.inputs().data());
        assert!(ds.subset_seeded(0, 1).is_err());
        assert!(ds.subset_seeded(301, 1).is_err());
    }

    #[test]
    fn gather_materializes_rows_with_labels() {
        let mut rng = Rng::new(95);
        let ds = synthetic_blobs(2, 5, 2, 4.0, &mut rng).unwrap();
        let batch = ds.gather(&[9, 0, 3]).unwrap();
        assert_eq!(batch.len(), 3);
        assert_eq!(batch.labels[0], ds.labels()[9]);
        assert_eq!(batch.inputs.row(1), ds.inputs().row(0));
    }
}
