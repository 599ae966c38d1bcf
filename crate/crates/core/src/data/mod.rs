//! Datasets: IDX ingestion, synthetic generators, subsetting and label noise.

pub mod idx;

use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{s, Array2, Axis};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IngestError, Result};
use crate::nn::{Batch, Targets};
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub targets: Targets,
    pub split: Split,
    /// Number of classes for labelled data.
    pub num_classes: Option<usize>,
    /// Free-form description of where the data came from and how it was processed.
    pub provenance: String,
}

impl Dataset {
    pub fn classification(inputs: Array2<f64>, labels: Vec<usize>, k: usize, provenance: impl Into<String>) -> Result<Self> {
        let ds = Dataset {
            inputs,
            targets: Targets::Labels(labels),
            split: Split::Train,
            num_classes: Some(k),
            provenance: provenance.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn regression(inputs: Array2<f64>, targets: Array2<f64>, provenance: impl Into<String>) -> Result<Self> {
        let ds = Dataset {
            inputs,
            targets: Targets::Dense(targets),
            split: Split::Train,
            num_classes: None,
            provenance: provenance.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.inputs.nrows() != self.targets.len() {
            return Err(Error::dim(format!(
                "{} inputs but {} targets",
                self.inputs.nrows(),
                self.targets.len()
            )));
        }
        if self.inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input values".into()));
        }
        if let (Targets::Labels(l), Some(k)) = (&self.targets, self.num_classes) {
            if let Some(&bad) = l.iter().find(|&&y| y >= k) {
                return Err(Error::dim(format!("label {bad} outside [0, {k})")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Labels(l) => Some(l),
            Targets::Dense(_) => None,
        }
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch::new(self.inputs.view(), self.targets.view())
    }

    pub fn rows(&self, range: std::ops::Range<usize>) -> Batch<'_> {
        Batch::new(self.inputs.slice(s![range.clone(), ..]), self.targets.rows(range))
    }

    /// Copies the listed rows, in order.
    pub fn gather(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select(Axis(0), idx),
            targets: self.targets.gather(idx),
            split: self.split,
            num_classes: self.num_classes,
            provenance: self.provenance.clone(),
        }
    }
}

/// Loads an IDX image/label pair (optionally gzipped). Pixels are divided by
/// 255 and not centered.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let x = idx::read_images(images.as_ref())?;
    let y = idx::read_labels(labels.as_ref())?;
    if x.nrows() != y.len() {
        return Err(IngestError::CountMismatch { images: x.nrows(), labels: y.len() }.into());
    }
    let k = y.iter().max().map(|m| m + 1).unwrap_or(0).max(10);
    Dataset::classification(
        x,
        y,
        k,
        format!("idx:{} pixels/255 uncentered", images.as_ref().display()),
    )
}

/// `k` unit-variance Gaussian clusters, labels balanced (`i mod k`).
///
/// Class means sit on a circle in the first two coordinates (a line when
/// `d = 1`) such that neighbouring means are exactly `separation` apart.
pub fn synthetic_blobs(k: usize, n: usize, d: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if k < 2 || n < k || d == 0 {
        return Err(Error::config("synthetic_blobs needs k >= 2, n >= k, d >= 1"));
    }
    let means = blob_means(k, d, separation);
    let mut rng = seeded(seed, 0x0b10b5);
    let mut x = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            x[[i, j]] = means[[c, j]] + z;
        }
        labels.push(c);
    }
    Dataset::classification(
        x,
        labels,
        k,
        format!("blobs k={k} n={n} d={d} sep={separation} seed={seed}"),
    )
}

fn blob_means(k: usize, d: usize, separation: f64) -> Array2<f64> {
    let mut means = Array2::zeros((k, d));
    if d == 1 {
        for c in 0..k {
            means[[c, 0]] = c as f64 * separation;
        }
    } else {
        let radius = separation / (2.0 * (std::f64::consts::PI / k as f64).sin());
        for c in 0..k {
            let a = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
            means[[c, 0]] = radius * a.cos();
            means[[c, 1]] = radius * a.sin();
        }
    }
    means
}

/// Inputs `X` (`n × d`) with `(1/n)·XᵀX = I`, built by orthonormalizing a
/// Gaussian draw and rescaling by `√n`.
pub fn whitened_inputs(n: usize, d: usize, rng: &mut impl Rng) -> Result<Array2<f64>> {
    if n < d {
        return Err(Error::config(format!("cannot whiten {d} features with only {n} samples")));
    }
    let g = DMatrix::<f64>::from_fn(n, d, |_, _| StandardNormal.sample(rng));
    let q = g.qr().q();
    let scale = (n as f64).sqrt();
    Ok(Array2::from_shape_fn((n, d), |(i, j)| q[(i, j)] * scale))
}

/// Whitened regression data with targets from a planted two-layer linear teacher.
#[derive(Clone, Debug)]
pub struct WhitenedRegression {
    pub dataset: Dataset,
    /// Teacher first layer, `k_rank × d`.
    pub teacher_w: Array2<f64>,
    /// Teacher second layer, `m × k_rank`.
    pub teacher_v: Array2<f64>,
}

/// Rows of the returned inputs are examples; targets are `Y = X (V* W*)ᵀ`.
pub fn whitened_regression(n: usize, d: usize, m: usize, k_rank: usize, seed: u64) -> Result<WhitenedRegression> {
    let mut rng = seeded(seed, 0x0a11);
    let x = whitened_inputs(n, d, &mut rng)?;
    let mut gauss = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| StandardNormal.sample(&mut rng));
    let teacher_w: Array2<f64> = gauss(k_rank, d);
    let teacher_v: Array2<f64> = gauss(m, k_rank);
    let y = x.dot(&teacher_v.dot(&teacher_w).t());
    let dataset = Dataset::regression(
        x,
        y,
        format!("whitened regression n={n} d={d} m={m} rank={k_rank} seed={seed}"),
    )?;
    Ok(WhitenedRegression { dataset, teacher_w, teacher_v })
}

/// Resamples labels of exactly `⌊p·n⌋` distinct examples uniformly from `[0, k)`.
pub fn corrupt_labels(ds: &Dataset, p: f64, k: usize, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config("corruption fraction must lie in [0, 1]"));
    }
    let labels = ds.labels().ok_or_else(|| Error::config("label corruption needs a classification dataset"))?;
    let n = labels.len();
    let touched = (p * n as f64).floor() as usize;
    let mut rng = seeded(seed, 0xc0ff);
    let mut out = labels.to_vec();
    for i in index::sample(&mut rng, n, touched) {
        out[i] = rng.random_range(0..k);
    }
    let mut res = ds.clone();
    res.targets = Targets::Labels(out);
    res.num_classes = Some(k.max(ds.num_classes.unwrap_or(0)));
    res.provenance = format!("{} | corrupted p={p} seed={seed}", ds.provenance);
    Ok(res)
}

/// Uniform sample of `n_sub` rows without replacement.
pub fn subset(ds: &Dataset, n_sub: usize, seed: u64) -> Result<Dataset> {
    if n_sub > ds.len() {
        return Err(Error::config(format!("subset of {n_sub} from {} rows", ds.len())));
    }
    let mut rng = seeded(seed, 0x5b5e);
    let idx = index::sample(&mut rng, ds.len(), n_sub).into_vec();
    let mut res = ds.gather(&idx);
    res.provenance = format!("{} | subset n={n_sub} seed={seed}", ds.provenance);
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let a = synthetic_blobs(3, 30, 4, 5.0, 11).unwrap();
        let b = synthetic_blobs(3, 30, 4, 5.0, 11).unwrap();
        assert_eq!(a, b);
        let labels = a.labels().unwrap();
        for c in 0..3 {
            assert_eq!(labels.iter().filter(|&&y| y == c).count(), 10);
        }
    }

    #[test]
    fn blob_means_have_requested_neighbour_distance() {
        for (k, d) in [(2, 2), (5, 3), (10, 8), (3, 1)] {
            let m = blob_means(k, d, 7.0);
            let dist = (&m.row(0) - &m.row(1)).mapv(|v| v * v).sum().sqrt();
            assert!((dist - 7.0).abs() < 1e-12, "k={k} d={d}: {dist}");
        }
    }

    #[test]
    fn zero_separation_gives_identical_class_means() {
        let ds = synthetic_blobs(2, 40_000, 3, 0.0, 2).unwrap();
        let labels = ds.labels().unwrap();
        let mean = |c: usize| {
            let rows: Vec<usize> = (0..ds.len()).filter(|&i| labels[i] == c).collect();
            ds.inputs.select(Axis(0), &rows).mean_axis(Axis(0)).unwrap()
        };
        let gap = (&mean(0) - &mean(1)).mapv(f64::abs).fold(0.0_f64, |a, &b| a.max(b));
        // two-sample mean difference has std sqrt(2/20000) ≈ 0.01
        assert!(gap < 0.05, "gap {gap}");
    }

    #[test]
    fn whitened_inputs_are_exactly_white() {
        let w = whitened_regression(50, 7, 3, 2, 1).unwrap();
        let x = &w.dataset.inputs;
        let cov = x.t().dot(x) / 50.0;
        let eye = Array2::<f64>::eye(7);
        let err = (&cov - &eye).mapv(f64::abs).fold(0.0_f64, |a, &b| a.max(b));
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn whitening_needs_enough_samples() {
        assert!(whitened_regression(3, 5, 2, 1, 0).is_err());
    }

    #[test]
    fn corruption_touches_floor_pn_rows() {
        let ds = synthetic_blobs(10, 100, 2, 1.0, 0).unwrap();
        let same = corrupt_labels(&ds, 0.0, 10, 1).unwrap();
        assert_eq!(same.targets, ds.targets);
        assert_eq!(same.inputs, ds.inputs);
        // Count rows selected by the same index draw: p = 0.5 -> 50 rows.
        let mut rng = seeded(1, 0xc0ff);
        let picked = index::sample(&mut rng, 100, 50);
        assert_eq!(picked.len(), 50);
        let half = corrupt_labels(&ds, 0.5, 10, 1).unwrap();
        let changed_outside = (0..100)
            .filter(|i| !picked.iter().any(|p| p == *i))
            .filter(|&i| half.labels().unwrap()[i] != ds.labels().unwrap()[i])
            .count();
        assert_eq!(changed_outside, 0);
        assert_eq!(half.inputs, ds.inputs);
    }

    #[test]
    fn full_corruption_keeps_about_a_tenth() {
        let ds = synthetic_blobs(10, 10_000, 2, 1.0, 3).unwrap();
        let c = corrupt_labels(&ds, 1.0, 10, 4).unwrap();
        let kept = ds
            .labels()
            .unwrap()
            .iter()
            .zip(c.labels().unwrap())
            .filter(|(a, b)| a == b)
            .count() as f64
            / 10_000.0;
        assert!((kept - 0.1).abs() < 0.01, "{kept}");
    }

    #[test]
    fn subset_sizes_and_determinism() {
        let ds = synthetic_blobs(10, 200, 3, 2.0, 0).unwrap();
        let a = subset(&ds, 10, 8).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, subset(&ds, 10, 8).unwrap());
        let all = subset(&ds, 200, 1).unwrap();
        let mut rows: Vec<Vec<u64>> = all.inputs.outer_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        let mut orig: Vec<Vec<u64>> = ds.inputs.outer_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        orig.sort();
        assert_eq!(rows, orig);
        assert!(subset(&ds, 201, 0).is_err());
    }
}
