//! Image datasets: CIFAR-10 binary batches, IDX files and a seeded synthetic
//! generator of Gaussian-blob textures.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{DataConfig, DataSource};
use crate::darts::Batch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATA_DIR_ENV: &str = "AXNAS_DATA_DIR";

const CIFAR_RECORD: usize = 3073;
const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];

/// Images stored as `f32` in `[n, c, h, w]` order with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplits {
    pub train: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        [channels, height, width]: [usize; 3],
        num_classes: usize,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Data(format!(
                "{} pixel values for {} images of {channels}×{height}×{width}",
                images.len(),
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {l} of image {i} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            channels,
            height,
            width,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn per_image(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.per_image();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let images = indices
            .iter()
            .flat_map(|&i| self.image(i).iter().copied())
            .collect();
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..*self
        }
    }

    /// Keeps the first `n` images.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.labels.truncate(n);
            self.images.truncate(n * self.per_image());
        }
    }

    /// Two disjoint halves of equal size drawn by a seeded shuffle.
    pub fn split_half(&self, rng: &mut impl Rng) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let half = self.len() / 2;
        (self.subset(&idx[..half]), self.subset(&idx[half..2 * half]))
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let [c, h, w] = self.image_shape();
        let data = indices
            .iter()
            .flat_map(|&i| self.image(i).iter().map(|&v| v as f64))
            .collect();
        Batch {
            images: Tensor::new([indices.len(), c, h, w], data).expect("consistent batch shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Shuffled index lists of exactly `batch_size` images; the incomplete
    /// tail is dropped.
    pub fn shuffled_batches(
        &self,
        batch_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<Vec<usize>>> {
        if batch_size == 0 || self.len() < batch_size {
            return Err(Error::Data(format!(
                "{} images cannot fill a batch of {batch_size}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        Ok(idx
            .chunks_exact(batch_size)
            .map(<[usize]>::to_vec)
            .collect())
    }

    /// Sequential index lists covering every image.
    pub fn ordered_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Per-channel mean and standard deviation.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let plane = self.height * self.width;
        let mut sum = vec![0.0; self.channels];
        let mut sq = vec![0.0; self.channels];
        for (i, &v) in self.images.iter().enumerate() {
            let c = (i / plane) % self.channels;
            sum[c] += v as f64;
            sq[c] += (v as f64) * (v as f64);
        }
        let count = (self.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        (mean, std)
    }

    pub fn normalize(&mut self, mean: &[f64], std: &[f64]) {
        let plane = self.height * self.width;
        let channels = self.channels;
        for (i, v) in self.images.iter_mut().enumerate() {
            let c = (i / plane) % channels;
            *v = ((*v as f64 - mean[c]) / std[c]) as f32;
        }
    }
}

impl DataSplits {
    /// Normalizes both splits with the training split's channel statistics.
    fn normalized(mut self) -> Self {
        let (mean, std) = self.train.channel_stats();
        self.train.normalize(&mean, &std);
        self.test.normalize(&mean, &std);
        self
    }
}

/// Resolves a dataset path against `AXNAS_DATA_DIR`.
pub fn resolve_data_path(path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match env::var_os(DATA_DIR_ENV) {
        Some(root) => Path::new(&root).join(p),
        None => p.to_path_buf(),
    }
}

pub fn load_dataset(cfg: &DataConfig) -> Result<DataSplits> {
    let mut splits = match cfg.source {
        DataSource::Synthetic => synthetic(cfg)?,
        DataSource::Cifar10 | DataSource::Idx => {
            let dir =
                resolve_data_path(cfg.path.as_deref().ok_or_else(|| {
                    Error::Data("`data.path` is required for file datasets".into())
                })?);
            if cfg.source == DataSource::Cifar10 {
                load_cifar10(&dir, cfg.num_classes)?
            } else {
                load_idx_dir(&dir, cfg.num_classes)?
            }
        }
    };
    if let Some(n) = cfg.max_train {
        splits.train.truncate(n);
    }
    if let Some(n) = cfg.max_test {
        splits.test.truncate(n);
    }
    Ok(splits.normalized())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Parses CIFAR-10 binary records (one label byte, 3072 channel-major pixels).
pub fn parse_cifar10(bytes: &[u8], num_classes: usize, origin: &str) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Data(format!(
            "{origin}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= num_classes {
            return Err(Error::Data(format!(
                "{origin}: record {i} has label {label}"
            )));
        }
        labels.push(label);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(images, labels, [3, 32, 32], num_classes)
}

pub fn load_cifar10(dir: &Path, num_classes: usize) -> Result<DataSplits> {
    let mut train_bytes = Vec::new();
    for f in CIFAR_TRAIN_FILES {
        let bytes = read(&dir.join(f))?;
        if !bytes.len().is_multiple_of(CIFAR_RECORD) {
            return Err(Error::Data(format!("{f}: truncated record")));
        }
        train_bytes.extend(bytes);
    }
    let test_bytes = read(&dir.join("test_batch.bin"))?;
    Ok(DataSplits {
        train: parse_cifar10(&train_bytes, num_classes, "training batches")?,
        test: parse_cifar10(&test_bytes, num_classes, "test_batch.bin")?,
    })
}

fn be_u32(bytes: &[u8], at: usize, origin: &str) -> Result<usize> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
        .ok_or_else(|| Error::Data(format!("{origin}: truncated header")))
}

/// Parses an IDX image file (`0x00000803`, `n × rows × cols` bytes) and a
/// label file (`0x00000801`).
pub fn parse_idx(images: &[u8], labels: &[u8], num_classes: usize) -> Result<Dataset> {
    if be_u32(images, 0, "image file")? != 0x803 {
        return Err(Error::Data(
            "image file: bad magic (expected 0x00000803)".into(),
        ));
    }
    if be_u32(labels, 0, "label file")? != 0x801 {
        return Err(Error::Data(
            "label file: bad magic (expected 0x00000801)".into(),
        ));
    }
    let n = be_u32(images, 4, "image file")?;
    let rows = be_u32(images, 8, "image file")?;
    let cols = be_u32(images, 12, "image file")?;
    let nl = be_u32(labels, 4, "label file")?;
    if n != nl {
        return Err(Error::Data(format!("{n} images but {nl} labels")));
    }
    let pixels = &images[16..];
    if pixels.len() != n * rows * cols {
        return Err(Error::Data(format!(
            "image file holds {} pixel bytes, header promises {}",
            pixels.len(),
            n * rows * cols
        )));
    }
    let lab = &labels[8..];
    if lab.len() != n {
        return Err(Error::Data(format!(
            "label file holds {} labels, header promises {n}",
            lab.len()
        )));
    }
    Dataset::new(
        pixels.iter().map(|&b| b as f32 / 255.0).collect(),
        lab.iter().map(|&l| l as usize).collect(),
        [1, rows, cols],
        num_classes,
    )
}

pub fn load_idx_dir(dir: &Path, num_classes: usize) -> Result<DataSplits> {
    let load = |img: &str, lab: &str| {
        parse_idx(&read(&dir.join(img))?, &read(&dir.join(lab))?, num_classes)
    };
    Ok(DataSplits {
        train: load("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?,
        test: load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?,
    })
}

struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    color: Vec<f64>,
}

const BLOBS_PER_CLASS: usize = 3;

/// Class-conditional textures: each class owns a few colored Gaussian blobs;
/// samples jitter their positions and amplitudes and add pixel noise.
pub fn synthetic(cfg: &DataConfig) -> Result<DataSplits> {
    let s = cfg.image_size as f64;
    let c = cfg.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes: Vec<Vec<Blob>> = (0..cfg.num_classes)
        .map(|_| {
            (0..BLOBS_PER_CLASS)
                .map(|_| Blob {
                    cy: rng.random_range(0.15 * s..0.85 * s),
                    cx: rng.random_range(0.15 * s..0.85 * s),
                    sigma: rng.random_range(0.08 * s..0.2 * s),
                    color: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
                })
                .collect()
        })
        .collect();
    let render = |per_class: usize, rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let n = per_class * cfg.num_classes;
        let size = cfg.image_size;
        let mut images = Vec::with_capacity(n * c * size * size);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % cfg.num_classes;
            let jitter = 0.06 * s;
            let blobs: Vec<(f64, f64, f64, f64)> = prototypes[label]
                .iter()
                .map(|b| {
                    let dy: f64 = StandardNormal.sample(rng);
                    let dx: f64 = StandardNormal.sample(rng);
                    let amp = rng.random_range(0.7..1.3);
                    (b.cy + jitter * dy, b.cx + jitter * dx, b.sigma, amp)
                })
                .collect();
            for ch in 0..c {
                for y in 0..size {
                    for x in 0..size {
                        let mut v = 0.0;
                        for (k, &(cy, cx, sigma, amp)) in blobs.iter().enumerate() {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            v += amp
                                * prototypes[label][k].color[ch]
                                * (-d2 / (2.0 * sigma * sigma)).exp();
                        }
                        let noise: f64 = StandardNormal.sample(rng);
                        images.push((v + cfg.noise * noise) as f32);
                    }
                }
            }
            labels.push(label);
        }
        Dataset::new(images, labels, [c, size, size], cfg.num_classes)
    };
    let train = render(cfg.train_per_class, &mut rng)?;
    let test = render(cfg.test_per_class, &mut rng)?;
    Ok(DataSplits { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::RunConfig;

    #[test]
    fn synthetic_is_seeded_and_normalized() {
        let cfg = RunConfig::preset("desk").unwrap().data;
        let a = load_dataset(&cfg).unwrap();
        let b = load_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 300);
        assert_eq!(a.train.image_shape(), [3, 16, 16]);
        let (mean, std) = a.train.channel_stats();
        assert!(mean.iter().all(|m| m.abs() < 1e-5));
        assert!(std.iter().all(|s| (s - 1.0).abs() < 1e-4));
    }

    #[test]
    fn cifar_records_are_checked() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[CIFAR_RECORD] = 9;
        bytes[CIFAR_RECORD + 1] = 255;
        let ds = parse_cifar10(&bytes, 10, "t").unwrap();
        assert_eq!(ds.labels(), &[0, 9]);
        assert_eq!(ds.image(1)[0], 1.0);
        assert!(parse_cifar10(&bytes[..CIFAR_RECORD + 5], 10, "t").is_err());
        bytes[0] = 10;
        let err = parse_cifar10(&bytes, 10, "t").unwrap_err().to_string();
        assert!(err.contains("label 10"), "{err}");
    }

    #[test]
    fn idx_round_trip() {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend([0, 51, 102, 255, 1, 2, 3, 4]);
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 1, 0];
        let ds = parse_idx(&img, &lab, 2).unwrap();
        assert_eq!(ds.image_shape(), [1, 2, 2]);
        assert_eq!(ds.image(0)[3], 1.0);
        assert!(parse_idx(&img[..20], &lab, 2).is_err());
        let mut bad = lab.clone();
        bad[3] = 3;
        assert!(parse_idx(&img, &bad, 2).is_err());
        assert!(parse_idx(&img, &lab, 1).is_err());
    }

    #[test]
    fn halves_are_disjoint_and_equal() {
        let ds =
            Dataset::new((0..7).map(|v| v as f32).collect(), vec![0; 7], [1, 1, 1], 2).unwrap();
        let (a, b) = ds.split_half(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a.len(), 3);
        assert_eq!(b.len(), 3);
        for i in 0..3 {
            assert!(!b.images.contains(&a.image(i)[0]));
        }
        assert!(ds
            .shuffled_batches(8, &mut ChaCha8Rng::seed_from_u64(0))
            .is_err());
        assert_eq!(
            ds.shuffled_batches(3, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap()
                .len(),
            2
        );
    }
}
