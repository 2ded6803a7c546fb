//! In-memory datasets and deterministic mini-batching.
//!
//! Images are stored as `f32` in `[0, 1]` with shape `N×C×H×W`; batches are
//! cast to whatever precision the caller trains in. File loaders live in the
//! companion crate.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    images: Tensor<f32>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    /// Checks that pixels lie in `[0, 1]`, labels lie below `classes` and the
    /// image tensor is `N×C×H×W` with `N` labels.
    pub fn new(
        name: impl Into<String>,
        split: Split,
        images: Tensor<f32>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        if images.rank() != 4 || images.rows() != labels.len() {
            return Err(Error::shape("dataset", images.shape(), &[labels.len()]));
        }
        if let Some(&bad) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain {
                op: "dataset",
                msg: format!("pixel {bad} outside [0, 1]"),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index {
                op: "dataset",
                index: bad,
                limit: classes,
            });
        }
        Ok(Dataset {
            name: name.into(),
            split,
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-sample shape `C×H×W`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Images and labels at the given indices, cast to `T`.
    pub fn batch<T: Real>(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let x = self.images.gather_rows(idx).cast();
        let y = idx.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    /// First `n` samples (or all of them if `n` exceeds the size).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            name: self.name.clone(),
            split: self.split,
            images: self.images.slice_rows(0, n),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            split: self.split,
            images: self.images.gather_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

/// Per-sample shape used for a flat feature dimension.
fn blob_shape(dim: usize) -> [usize; 3] {
    match dim {
        784 => [1, 28, 28],
        3072 => [3, 32, 32],
        d => [1, 1, d],
    }
}

/// Gaussian class blobs clipped to `[0, 1]`.
///
/// Class centers are `0.5 + 0.25·separation·g` with `g` standard normal per
/// coordinate; samples add isotropic noise of standard deviation 0.15.
/// Samples are emitted in shuffled order.
pub fn synth_blobs(
    n_per_class: usize,
    classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = rng::seeded(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    0.5 + 0.25 * separation * g
                })
                .collect()
        })
        .collect();
    let n = n_per_class * classes;
    let order = rng::permutation(&mut rng, n);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for &k in &order {
        let c = k % classes;
        labels.push(c);
        for &m in &centers[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push((m + 0.15 * z).clamp(0.0, 1.0) as f32);
        }
    }
    let s = blob_shape(dim);
    let images = Tensor::new(&[n, s[0], s[1], s[2]], data)?;
    Dataset::new("blobs", Split::Train, images, labels, classes)
}

/// Index batches for one epoch.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    order: Vec<usize>,
    size: usize,
    cursor: usize,
    drop_small: bool,
}

/// Shuffled batches of `size` indices over `0..n`. The permutation depends
/// only on `(seed, epoch)`. With `drop_small`, a trailing batch shorter than
/// `size` is skipped.
pub fn batches(n: usize, size: usize, seed: u64, epoch: u64, drop_small: bool) -> Result<BatchIterator> {
    if size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if size > n {
        return Err(Error::Config(format!(
            "batch size {size} exceeds dataset size {n}"
        )));
    }
    let mut r = rng::seeded(rng::derive(seed, epoch));
    Ok(BatchIterator {
        order: rng::permutation(&mut r, n),
        size,
        cursor: 0,
        drop_small,
    })
}

impl BatchIterator {
    /// Number of batches this epoch yields.
    pub fn count_batches(&self) -> usize {
        let n = self.order.len();
        if self.drop_small {
            n / self.size
        } else {
            n.div_ceil(self.size)
        }
    }
}

impl Iterator for BatchIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let rest = self.order.len() - self.cursor;
        if rest == 0 || (self.drop_small && rest < self.size) {
            return None;
        }
        let end = self.cursor + rest.min(self.size);
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(out)
    }
}
