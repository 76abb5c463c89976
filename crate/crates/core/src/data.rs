//! Image datasets: a structured synthetic generator for desk-scale runs and a
//! loader for the CIFAR-10 binary distribution.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::ImageBatch;

/// Environment variable naming the dataset root directory.
pub const DATA_ROOT_ENV: &str = "RELAY_JSCC_DATA";

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Smooth random images: a few low-frequency cosine modes shared across
/// channels with per-channel tint, plus a little texture noise.
pub fn synthetic(n: usize, shape: (usize, usize, usize), seed: u64) -> ImageBatch {
    let (c, h, w) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * c * h * w);
    for _ in 0..n {
        let modes: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                let fx = rng.random_range(0..3) as f64;
                let fy = rng.random_range(0..3) as f64;
                (fx, fy, rng.random_range(0.0..2.0 * PI), rng.random_range(0.1..0.3))
            })
            .collect();
        let base: f64 = rng.random_range(0.3..0.7);
        let tint: Vec<f64> = (0..c).map(|_| rng.random_range(-0.15..0.15)).collect();
        let gain: Vec<f64> = (0..c).map(|_| rng.random_range(0.7..1.3)).collect();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
                    let field: f64 = modes.iter().map(|&(fx, fy, ph, a)| a * (PI * (fx * u + fy * v) + ph).cos()).sum();
                    let noise = rng.random_range(-0.02..0.02);
                    pixels.push((base + tint[ch] + gain[ch] * field + noise).clamp(0.0, 1.0));
                }
            }
        }
    }
    ImageBatch { n, c, h, w, pixels }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarSplit {
    Train,
    Test,
}

/// Reads CIFAR-10 binary batches from `root` (the `cifar-10-batches-bin`
/// directory or its parent), keeping at most `limit` images.
pub fn load_cifar10(root: &Path, split: CifarSplit, limit: Option<usize>) -> Result<ImageBatch> {
    let dir = if root.join("cifar-10-batches-bin").is_dir() { root.join("cifar-10-batches-bin") } else { root.to_path_buf() };
    let files: Vec<PathBuf> = match split {
        CifarSplit::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        CifarSplit::Test => vec![dir.join("test_batch.bin")],
    };
    let max = limit.unwrap_or(usize::MAX);
    let mut pixels = Vec::new();
    let mut n = 0;
    for f in files {
        if n >= max {
            break;
        }
        let bytes = fs::read(&f).map_err(|e| Error::Dataset(format!("cannot read {}: {e}", f.display())))?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Dataset(format!("{} is not a CIFAR-10 binary batch", f.display())));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if n >= max {
                break;
            }
            pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
            n += 1;
        }
    }
    ImageBatch::new(n, 3, 32, 32, pixels)
}

/// Deterministic train/validation split.
pub fn split(batch: &ImageBatch, n_val: usize, seed: u64) -> Result<(ImageBatch, ImageBatch)> {
    if n_val >= batch.n {
        return Err(Error::Dataset(format!("validation size {n_val} leaves no training images out of {}", batch.n)));
    }
    let mut idx: Vec<usize> = (0..batch.n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (val, train) = idx.split_at(n_val);
    Ok((batch.select(train), batch.select(val)))
}

/// Dataset section of an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        train: usize,
        val: usize,
        test: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_shape")]
        shape: (usize, usize, usize),
    },
    Cifar10 {
        /// Falls back to the `RELAY_JSCC_DATA` environment variable.
        #[serde(default)]
        root: Option<PathBuf>,
        #[serde(default = "default_val")]
        val: usize,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
        #[serde(default)]
        seed: u64,
    },
}

fn default_shape() -> (usize, usize, usize) {
    (3, 8, 8)
}

fn default_val() -> usize {
    5000
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub train: ImageBatch,
    pub val: ImageBatch,
    pub test: ImageBatch,
}

impl DatasetSpec {
    pub fn toy() -> Self {
        DatasetSpec::Synthetic { train: 2000, val: 256, test: 512, seed: 0, shape: default_shape() }
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        match self {
            DatasetSpec::Synthetic { shape, .. } => *shape,
            DatasetSpec::Cifar10 { .. } => (3, 32, 32),
        }
    }

    pub fn root(&self) -> Option<PathBuf> {
        match self {
            DatasetSpec::Synthetic { .. } => None,
            DatasetSpec::Cifar10 { root, .. } => root.clone().or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from)),
        }
    }

    /// Fails before any work if the dataset cannot be located.
    pub fn check(&self) -> Result<()> {
        if let DatasetSpec::Cifar10 { .. } = self {
            let root = self.root().ok_or_else(|| {
                Error::Dataset(format!("no CIFAR-10 root given; set `root` in the dataset section or {DATA_ROOT_ENV}"))
            })?;
            if !root.exists() {
                return Err(Error::Dataset(format!("dataset root {} does not exist", root.display())));
            }
        }
        Ok(())
    }

    pub fn load(&self) -> Result<Datasets> {
        self.check()?;
        match self {
            DatasetSpec::Synthetic { train, val, test, seed, shape } => Ok(Datasets {
                train: synthetic(*train, *shape, seed.wrapping_mul(3)),
                val: synthetic(*val, *shape, seed.wrapping_mul(3) + 1),
                test: synthetic(*test, *shape, seed.wrapping_mul(3) + 2),
            }),
            DatasetSpec::Cifar10 { val, train_limit, test_limit, seed, .. } => {
                let root = self.root().expect("checked above");
                let all = load_cifar10(&root, CifarSplit::Train, train_limit.map(|l| l + val))?;
                let (train, val) = split(&all, *val, *seed)?;
                let test = load_cifar10(&root, CifarSplit::Test, *test_limit)?;
                Ok(Datasets { train, val, test })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let a = synthetic(10, (3, 8, 8), 4);
        assert_eq!(a, synthetic(10, (3, 8, 8), 4));
        assert_ne!(a, synthetic(10, (3, 8, 8), 5));
        assert!(a.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(a.variance() > 0.005);
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let b = synthetic(20, (1, 4, 4), 0);
        let (t, v) = split(&b, 5, 1).unwrap();
        assert_eq!((t.n, v.n), (15, 5));
        assert_eq!(split(&b, 5, 1).unwrap().1, v);
        assert!(split(&b, 20, 1).is_err());
    }

    #[test]
    fn cifar_binary_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for i in 0..3u8 {
            bytes.push(i);
            bytes.extend(std::iter::repeat_n(i * 100, 3072));
        }
        fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();
        let b = load_cifar10(dir.path(), CifarSplit::Test, Some(2)).unwrap();
        assert_eq!((b.n, b.c, b.h, b.w), (2, 3, 32, 32));
        assert!((b.image(1)[0] - 100.0 / 255.0).abs() < 1e-12);
        assert!(load_cifar10(dir.path(), CifarSplit::Train, None).is_err());
    }

    #[test]
    fn missing_root_is_reported() {
        let spec = DatasetSpec::Cifar10 { root: Some("/nonexistent/cifar".into()), val: 10, train_limit: None, test_limit: None, seed: 0 };
        assert!(matches!(spec.check(), Err(Error::Dataset(_))));
    }
}
