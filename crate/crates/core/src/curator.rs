//! Data curators: dataset loading, deterministic sharding across ranks, and
//! seeded batch samplers.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];
pub const CIFAR10_IMAGE_BYTES: usize = 3 * 32 * 32;
pub const CIFAR10_RECORD_BYTES: usize = 1 + CIFAR10_IMAGE_BYTES;
pub const CIFAR10_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR10_FILE_BYTES: usize = CIFAR10_RECORD_BYTES * CIFAR10_RECORDS_PER_FILE;
pub const CIFAR10_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR10_TEST_FILE: &str = "test_batch.bin";

/// Labelled images with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    images: Tensor<T>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::Input(format!(
                "images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Input(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Input(format!(
                "label {bad} outside the {} known classes",
                class_names.len()
            )));
        }
        if images.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("images contain non-finite values".into()));
        }
        Ok(Self {
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// The first `n` examples (all of them if `n` exceeds the length).
    pub fn head(&self, n: usize) -> Result<Self> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        let idx: Vec<usize> = (0..n).collect();
        Ok(Self {
            images: self.images.select(&idx)?,
            labels: self.labels[..n].to_vec(),
            class_names: self.class_names.clone(),
        })
    }

    /// Gathers the given examples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let images = self.images.select(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    /// Iterates shuffled batches of a shard as `(images, labels)`.
    pub fn batches<'a>(
        &'a self,
        shard: &'a Shard,
        batch_size: usize,
        epoch_seed: u64,
    ) -> impl Iterator<Item = Result<(Tensor<T>, Vec<usize>)>> + 'a {
        batches(shard, batch_size, epoch_seed).map(move |idx| self.batch(&idx))
    }
}

/// A training set and a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit<T> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
}

/// Reads the five CIFAR-10 training batches and the test batch from
/// `directory`. Every file must hold exactly 10 000 records.
pub fn load_cifar10<T: Scalar>(directory: &Path) -> Result<DataSplit<T>> {
    let mut parts = Vec::with_capacity(CIFAR10_TRAIN_FILES.len());
    for name in CIFAR10_TRAIN_FILES {
        parts.push(load_standard_file(&directory.join(name))?);
    }
    let test = load_standard_file(&directory.join(CIFAR10_TEST_FILE))?;
    let train = concat(parts)?;
    Ok(DataSplit {
        train: to_dataset(train)?,
        test: to_dataset(test)?,
    })
}

/// Reads one file in the CIFAR-10 binary layout: records of one label byte
/// followed by 3072 pixel bytes (R, G, B planes of 32x32, row-major).
pub fn load_cifar10_file<T: Scalar>(path: &Path) -> Result<Dataset<T>> {
    to_dataset(read_records(path, None)?)
}

/// Writes a 3x32x32 dataset in the CIFAR-10 binary layout. Pixels are
/// rounded to the nearest of the 256 levels.
pub fn write_cifar10_file<T: Scalar>(path: &Path, dataset: &Dataset<T>) -> Result<()> {
    if dataset.image_shape() != [3, 32, 32] {
        return Err(Error::Input(format!(
            "CIFAR-10 layout needs 3x32x32 images, got {:?}",
            dataset.image_shape()
        )));
    }
    if dataset.classes() > 256 {
        return Err(Error::Input("labels must fit in one byte".into()));
    }
    let mut bytes = Vec::with_capacity(dataset.len() * CIFAR10_RECORD_BYTES);
    for (i, &label) in dataset.labels.iter().enumerate() {
        bytes.push(label as u8);
        let pixels = &dataset.images.data()[i * CIFAR10_IMAGE_BYTES..(i + 1) * CIFAR10_IMAGE_BYTES];
        bytes.extend(
            pixels
                .iter()
                .map(|p| (p.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    fs::write(path, bytes)?;
    Ok(())
}

struct RawRecords {
    labels: Vec<usize>,
    pixels: Vec<u8>,
}

fn load_standard_file(path: &Path) -> Result<RawRecords> {
    read_records(path, Some(CIFAR10_FILE_BYTES))
}

fn read_records(path: &Path, exact_size: Option<usize>) -> Result<RawRecords> {
    let load_err = |reason: String| Error::Load {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| load_err(e.to_string()))?;
    match exact_size {
        Some(size) if bytes.len() != size => {
            return Err(load_err(format!(
                "expected {size} bytes, found {}",
                bytes.len()
            )))
        }
        _ if bytes.is_empty() || bytes.len() % CIFAR10_RECORD_BYTES != 0 => {
            return Err(load_err(format!(
                "{} bytes is not a whole number of {CIFAR10_RECORD_BYTES}-byte records",
                bytes.len()
            )))
        }
        _ => {}
    }
    let count = bytes.len() / CIFAR10_RECORD_BYTES;
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * CIFAR10_IMAGE_BYTES);
    for (i, record) in bytes.chunks_exact(CIFAR10_RECORD_BYTES).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR10_CLASSES.len() {
            return Err(load_err(format!("record {i} has label byte {label} > 9")));
        }
        labels.push(label);
        pixels.extend_from_slice(&record[1..]);
    }
    Ok(RawRecords { labels, pixels })
}

fn concat(parts: Vec<RawRecords>) -> Result<RawRecords> {
    let mut out = RawRecords {
        labels: Vec::new(),
        pixels: Vec::new(),
    };
    for p in parts {
        out.labels.extend(p.labels);
        out.pixels.extend(p.pixels);
    }
    Ok(out)
}

fn to_dataset<T: Scalar>(raw: RawRecords) -> Result<Dataset<T>> {
    let n = raw.labels.len();
    let scale = T::of(1.0 / 255.0);
    let data = raw
        .pixels
        .iter()
        .map(|&b| T::of(b as f64) * scale)
        .collect();
    Dataset::new(
        Tensor::new(vec![n, 3, 32, 32], data)?,
        raw.labels,
        CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
    )
}

/// Class-conditional Gaussian blobs: each class has a fixed random mean
/// image, and examples add N(0, 0.1) pixel noise, clamped to `[0, 1]`.
/// Labels are balanced (counts differ by at most one) and shuffled.
pub fn synthetic_dataset<T: Scalar>(
    seed: u64,
    n_train: usize,
    n_test: usize,
    classes: usize,
    shape: [usize; 3],
) -> Result<DataSplit<T>> {
    if classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if n_train == 0 || n_test == 0 || shape.contains(&0) {
        return Err(Error::Config(
            "synthetic dataset sizes and image shape must be positive".into(),
        ));
    }
    let pixels: usize = shape.iter().product();
    let mut rng = seeded(derive_seed(seed, &[0]));
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..pixels).map(|_| rng.random_range(0.2..0.8)).collect())
        .collect();
    let names: Vec<String> = (0..classes).map(|c| format!("class_{c}")).collect();
    let noise = Normal::new(0.0, 0.1).expect("valid normal");
    let make = |n: usize, stream: u64| -> Result<Dataset<T>> {
        let mut rng = seeded(derive_seed(seed, &[stream]));
        let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        labels.shuffle(&mut rng);
        let mut data = Vec::with_capacity(n * pixels);
        for &label in &labels {
            for &m in &means[label] {
                let v: f64 = m + noise.sample(&mut rng);
                data.push(T::of(v.clamp(0.0, 1.0)));
            }
        }
        Dataset::new(
            Tensor::new(vec![n, shape[0], shape[1], shape[2]], data)?,
            labels,
            names.clone(),
        )
    };
    Ok(DataSplit {
        train: make(n_train, 1)?,
        test: make(n_test, 2)?,
    })
}

/// The indices of a dataset assigned to one rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub rank: usize,
    pub world_size: usize,
    pub indices: Vec<usize>,
}

impl Shard {
    /// Strided assignment of `0..len`: rank `r` owns `{i : i mod world = r}`.
    pub fn new(len: usize, rank: usize, world_size: usize) -> Result<Self> {
        if world_size == 0 || rank >= world_size {
            return Err(Error::Config(format!(
                "rank {rank} is outside a world of {world_size}"
            )));
        }
        if world_size > len {
            return Err(Error::Config(format!(
                "cannot shard {len} examples across {world_size} ranks"
            )));
        }
        Ok(Self {
            rank,
            world_size,
            indices: (rank..len).step_by(world_size).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn shard<T: Scalar>(dataset: &Dataset<T>, rank: usize, world_size: usize) -> Result<Shard> {
    Shard::new(dataset.len(), rank, world_size)
}

/// Elements of `items` at positions `p` with `p mod world = rank`.
pub fn strided<U: Clone>(items: &[U], rank: usize, world_size: usize) -> Vec<U> {
    items
        .iter()
        .skip(rank)
        .step_by(world_size.max(1))
        .cloned()
        .collect()
}

/// Shuffles a shard's indices with a generator seeded by
/// `(epoch_seed, rank)` and yields batches of `batch_size`, plus one final
/// partial batch when the size does not divide evenly.
pub fn batches(
    shard: &Shard,
    batch_size: usize,
    epoch_seed: u64,
) -> impl Iterator<Item = Vec<usize>> {
    let mut order = shard.indices.clone();
    order.shuffle(&mut seeded(derive_seed(epoch_seed, &[shard.rank as u64])));
    let size = batch_size.max(1);
    let count = order.len().div_ceil(size);
    (0..count).map(move |b| order[b * size..((b + 1) * size).min(order.len())].to_vec())
}

fn default_train_size() -> usize {
    2048
}

fn default_test_size() -> usize {
    512
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

/// Where evaluation data comes from. `classes`, `image_shape`, `seed` and
/// the sizes only apply to synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    pub classes: usize,
    pub image_shape: [usize; 3],
    /// Seed of the synthetic generator.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            data_dir: None,
            classes: 10,
            image_shape: [3, 8, 8],
            seed: 0,
            train_size: default_train_size(),
            test_size: default_test_size(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match self.source {
            DataSource::Synthetic => {
                if self.classes < 2 {
                    return Err(Error::Config("data.classes must be >= 2".into()));
                }
                if self.image_shape.contains(&0) {
                    return Err(Error::Config(
                        "data.image_shape entries must be >= 1".into(),
                    ));
                }
                if self.train_size == 0 || self.test_size == 0 {
                    return Err(Error::Config("data sizes must be >= 1".into()));
                }
            }
            DataSource::Cifar10 => {
                if self.data_dir.is_none() {
                    return Err(Error::Config(
                        "data.data_dir is required for cifar10".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn load<T: Scalar>(&self) -> Result<DataSplit<T>> {
        self.validate()?;
        match self.source {
            DataSource::Synthetic => synthetic_dataset(
                self.seed,
                self.train_size,
                self.test_size,
                self.classes,
                self.image_shape,
            ),
            DataSource::Cifar10 => load_cifar10(self.data_dir.as_deref().expect("validated")),
        }
    }
}
