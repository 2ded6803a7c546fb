//! Locating and loading datasets by name.

use std::path::{Path, PathBuf};

use decorr_core::data::{synth_blobs, Dataset, Split};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::{cifar, idx};

pub const DATA_DIR_ENV: &str = "DECORR_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Mnist,
    Cifar10,
    /// Synthetic MNIST-shaped Gaussian blobs.
    Blobs,
    /// Synthetic CIFAR-shaped Gaussian blobs.
    BlobsCifar,
}

/// `$DECORR_DATA_DIR`, falling back to `./data`.
pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

fn first_existing(candidates: &[PathBuf]) -> PathBuf {
    candidates
        .iter()
        .find(|p| p.is_dir())
        .cloned()
        .unwrap_or_else(|| candidates[candidates.len() - 1].clone())
}

pub fn load(name: DatasetName, split: Split, dir: &Path) -> Result<Dataset> {
    let seed = match split {
        Split::Train => 11,
        Split::Test => 12,
    };
    match name {
        DatasetName::Mnist => idx::load_mnist(&first_existing(&[dir.join("mnist"), dir.to_path_buf()]), split),
        DatasetName::Cifar10 => cifar::load_cifar10(
            &first_existing(&[dir.join("cifar10"), dir.join("cifar-10-batches-bin"), dir.to_path_buf()]),
            split,
        ),
        // Both splits share class centers (seed 7 inside the generator is
        // fixed per call), so only the sample noise differs.
        DatasetName::Blobs | DatasetName::BlobsCifar => {
            let dim = if name == DatasetName::Blobs { 784 } else { 3072 };
            let n = if split == Split::Train { 600 } else { 200 };
            let mut ds = blobs_split(n, dim, seed)?;
            ds.split = split;
            Ok(ds)
        }
    }
}

/// Ten-class blobs whose centers do not depend on `sample_seed`.
fn blobs_split(n_per_class: usize, dim: usize, sample_seed: u64) -> Result<Dataset> {
    // Draw a large pool once from a fixed seed and pick a split-specific
    // slice of it, so train and test share centers.
    let pool = synth_blobs(n_per_class * 2, 10, dim, 1.0, 7)?;
    let start = if sample_seed == 11 { 0 } else { n_per_class * 10 };
    let idx: Vec<usize> = (start..start + n_per_class * 10).collect();
    Ok(pool.select(&idx))
}
