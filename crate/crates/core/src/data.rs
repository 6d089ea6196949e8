//! Datasets: seeded Gaussian blobs, MNIST IDX files and CIFAR-10 binaries.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Labeled samples. The leading axis of `features` indexes samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if features.shape()[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "{} samples but {} labels",
                features.shape()[0],
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index { label, classes });
        }
        Ok(Dataset {
            features,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
        }
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..self.len().min(n)).collect();
        self.subset(&idx)
    }
}

/// A train/val pair sharing one class count.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
}

/// Recipe for an isotropic Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    /// Distance between any two class means.
    pub separation: f64,
    pub sigma: f64,
    pub per_class: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("blobs_classes", "need at least 2 classes"));
        }
        if self.dim + 1 < self.classes {
            return Err(Error::config(
                "blobs_dim",
                format!(
                    "{} classes need at least {} dimensions",
                    self.classes,
                    self.classes - 1
                ),
            ));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(
                "blobs_sigma",
                format!("must be > 0, got {}", self.sigma),
            ));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::config("blobs_separation", "must be finite and >= 0"));
        }
        if self.per_class * self.classes < 5 {
            return Err(Error::config(
                "blobs_per_class",
                "too few samples for an 80/20 split",
            ));
        }
        Ok(())
    }

    /// Class means: vertices of a regular simplex with pairwise distance
    /// `separation`, embedded in the first `classes - 1` coordinates.
    pub fn means(&self) -> Vec<Vec<f64>> {
        let c = self.classes;
        // Orthonormal basis of the sum-zero subspace of R^c via Gram-Schmidt.
        let centered: Vec<Vec<f64>> = (0..c)
            .map(|i| (0..c).map(|j| f64::from(i == j) - 1.0 / c as f64).collect())
            .collect();
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for v in &centered {
            let mut u = v.clone();
            for b in &basis {
                let p: f64 = u.iter().zip(b).map(|(x, y)| x * y).sum();
                u.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-9 && basis.len() < c - 1 {
                basis.push(u.into_iter().map(|x| x / n).collect());
            }
        }
        let scale = self.separation / std::f64::consts::SQRT_2;
        centered
            .iter()
            .map(|v| {
                let mut m = vec![0.0; self.dim];
                for (k, b) in basis.iter().enumerate() {
                    m[k] = scale * v.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                }
                m
            })
            .collect()
    }
}

/// Samples the mixture and splits it 80/20 after a seeded shuffle.
pub fn gen_blobs(spec: &SynthSpec) -> Result<Splits> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = spec.means();
    let n = spec.classes * spec.per_class;
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.per_class {
            let x = mean
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + spec.sigma * z
                })
                .collect();
            rows.push((x, c));
        }
    }
    rows.shuffle(&mut rng);
    let n_train = n * 4 / 5;
    let build = |part: &[(Vec<f64>, usize)], split| {
        let data = part.iter().flat_map(|(x, _)| x.iter().copied()).collect();
        let labels = part.iter().map(|(_, y)| *y).collect();
        Dataset::new(
            Tensor::new(vec![part.len(), spec.dim], data)?,
            labels,
            spec.classes,
            split,
        )
    };
    Ok(Splits {
        train: build(&rows[..n_train], Split::Train)?,
        val: build(&rows[n_train..], Split::Val)?,
    })
}

/// Per-channel standardization fitted on one split. The channel axis is
/// axis 1 of the features; for flat feature vectors that is each feature.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(data: &Dataset) -> Self {
        let shape = data.features.shape();
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let layout = crate::autodiff::kernels::ChannelLayout {
            batch: n,
            channels: c,
            spatial,
        };
        let (mean, var) = crate::autodiff::kernels::channel_moments(data.features.data(), &layout);
        let std = var
            .iter()
            .map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        Normalizer { mean, std }
    }

    pub fn apply(&self, data: &mut Dataset) {
        let shape = data.features.shape().to_vec();
        let (c, spatial) = (shape[1], shape[2..].iter().product::<usize>());
        for (i, v) in data.features.data_mut().iter_mut().enumerate() {
            let ch = (i / spatial) % c;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
    }
}

/// Fits on train and standardizes both splits in place.
pub fn normalize_splits(splits: &mut Splits) -> Normalizer {
    let norm = Normalizer::fit(&splits.train);
    norm.apply(&mut splits.train);
    norm.apply(&mut splits.val);
    norm
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw unsigned-byte IDX payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxFile {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let b = bytes.get(at..at + 4).ok_or(Error::Length {
        expected: at + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses an unsigned-byte IDX buffer whose magic must equal `expect_magic`.
pub fn parse_idx(bytes: &[u8], expect_magic: u32) -> Result<IdxFile> {
    let magic = be_u32(bytes, 0)?;
    if magic != expect_magic {
        return Err(Error::Format(format!(
            "IDX magic {magic:#010x}, expected {expect_magic:#010x}"
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndim;
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            found: bytes.len(),
        });
    }
    Ok(IdxFile {
        magic,
        dims,
        payload: bytes[header..].to_vec(),
    })
}

/// IDX image file as `[N, 1, H, W]` with pixels scaled to `[0, 1]`.
pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    let idx = parse_idx(&read_bytes(path)?, IDX_IMAGES_MAGIC)?;
    let (n, h, w) = (idx.dims[0], idx.dims[1], idx.dims[2]);
    let data = idx.payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![n, 1, h, w], data)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let idx = parse_idx(&read_bytes(path)?, IDX_LABELS_MAGIC)?;
    Ok(idx.payload.iter().map(|&b| b as usize).collect())
}

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_CLASSES: usize = 10;

/// Parses CIFAR-10 binary records: one label byte then 3072 channel-major
/// pixels. Returns `[N, 3, 32, 32]` in `[0, 1]` and the labels.
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Tensor, Vec<usize>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "CIFAR-10 file of {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::LabelRange {
                label: rec[0],
                classes: CIFAR_CLASSES,
            });
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok((Tensor::new(vec![n, 3, 32, 32], data)?, labels))
}

pub fn read_cifar10(path: &Path) -> Result<(Tensor, Vec<usize>)> {
    parse_cifar10(&read_bytes(path)?)
}

/// Where a run's data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetRef {
    Blobs(SynthSpec),
    /// Directory holding the four standard uncompressed MNIST IDX files.
    Mnist {
        dir: PathBuf,
        train_limit: Option<usize>,
        val_limit: Option<usize>,
    },
    /// Directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar10 {
        dir: PathBuf,
        train_limit: Option<usize>,
        val_limit: Option<usize>,
    },
}

fn concat(parts: Vec<(Tensor, Vec<usize>)>) -> Result<(Tensor, Vec<usize>)> {
    let mut shape = parts[0].0.shape().to_vec();
    shape[0] = parts.iter().map(|p| p.0.shape()[0]).sum();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (t, l) in parts {
        data.extend_from_slice(t.data());
        labels.extend(l);
    }
    Ok((Tensor::new(shape, data)?, labels))
}

/// Loads (or generates) both splits and standardizes them with train statistics.
pub fn load_splits(source: &DatasetRef) -> Result<Splits> {
    let mut splits = match source {
        DatasetRef::Blobs(spec) => gen_blobs(spec)?,
        DatasetRef::Mnist {
            dir,
            train_limit,
            val_limit,
        } => {
            let load = |img: &str, lbl: &str, split, limit: &Option<usize>| -> Result<Dataset> {
                let d = Dataset::new(
                    read_idx_images(&dir.join(img))?,
                    read_idx_labels(&dir.join(lbl))?,
                    10,
                    split,
                )?;
                Ok(limit.map_or_else(|| d.clone(), |n| d.head(n)))
            };
            Splits {
                train: load(
                    "train-images-idx3-ubyte",
                    "train-labels-idx1-ubyte",
                    Split::Train,
                    train_limit,
                )?,
                val: load(
                    "t10k-images-idx3-ubyte",
                    "t10k-labels-idx1-ubyte",
                    Split::Val,
                    val_limit,
                )?,
            }
        }
        DatasetRef::Cifar10 {
            dir,
            train_limit,
            val_limit,
        } => {
            let batches = (1..=5)
                .map(|i| read_cifar10(&dir.join(format!("data_batch_{i}.bin"))))
                .collect::<Result<Vec<_>>>()?;
            let (x, y) = concat(batches)?;
            let train = Dataset::new(x, y, CIFAR_CLASSES, Split::Train)?;
            let (vx, vy) = read_cifar10(&dir.join("test_batch.bin"))?;
            let val = Dataset::new(vx, vy, CIFAR_CLASSES, Split::Val)?;
            Splits {
                train: train_limit.map_or_else(|| train.clone(), |n| train.head(n)),
                val: val_limit.map_or_else(|| val.clone(), |n| val.head(n)),
            }
        }
    };
    normalize_splits(&mut splits);
    Ok(splits)
}
