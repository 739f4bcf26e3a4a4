//! MNIST (IDX) and CIFAR-10 (binary batch) datasets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Rng, Tensor};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(N, C, H, W)`
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        if n != labels.len() {
            return Err(Error::shape(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {l} outside {num_classes} classes")));
        }
        Ok(Dataset { images, labels, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn subset(&self, idx: &[usize], split: Split) -> Result<Dataset> {
        let images = self.images.select_rows(idx)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(images, labels, self.num_classes, split)
    }

    /// Shuffles with `rng` and returns `(first n_a, next n_b)` as train/val.
    pub fn random_split(&self, n_a: usize, n_b: usize, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
        if n_a == 0 || n_b == 0 || n_a + n_b > self.len() {
            return Err(Error::invalid(format!("cannot split {} items into {n_a} + {n_b}", self.len())));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut idx);
        Ok((self.subset(&idx[..n_a], Split::Train)?, self.subset(&idx[n_a..n_a + n_b], Split::Val)?))
    }

    /// Images and labels at `idx`, optionally with pad-4 crop and flip.
    pub fn batch(&self, idx: &[usize], augment: Option<&mut Rng>) -> Result<(Tensor<f32>, Vec<usize>)> {
        let mut x = self.images.select_rows(idx)?;
        if let Some(rng) = augment {
            augment_in_place(&mut x, 4, rng)?;
        }
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Per-channel mean and standard deviation.
    pub fn channel_stats(&self) -> Vec<(f64, f64)> {
        let (n, c, h, w) = self.images.dims4().expect("4-d images");
        let plane = h * w;
        (0..c)
            .map(|ch| {
                let (mut s, mut ss) = (0.0f64, 0.0f64);
                for b in 0..n {
                    for &v in &self.images.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                        s += v as f64;
                        ss += (v as f64) * (v as f64);
                    }
                }
                let cnt = (n * plane) as f64;
                let mean = s / cnt;
                (mean, (ss / cnt - mean * mean).max(0.0).sqrt())
            })
            .collect()
    }

    pub fn standardize(&mut self, stats: &[(f64, f64)]) -> Result<()> {
        let (n, c, h, w) = self.images.dims4()?;
        if stats.len() != c {
            return Err(Error::shape(format!("{} channel statistics for {c} channels", stats.len())));
        }
        let plane = h * w;
        let data = self.images.data_mut();
        for b in 0..n {
            for (ch, &(mean, std)) in stats.iter().enumerate() {
                let inv = if std > 0.0 { 1.0 / std } else { 1.0 };
                for v in &mut data[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                    *v = ((*v as f64 - mean) * inv) as f32;
                }
            }
        }
        Ok(())
    }
}

/// Random crop from a zero-padded image plus a horizontal flip with
/// probability one half.
pub fn augment_in_place(x: &mut Tensor<f32>, pad: usize, rng: &mut Rng) -> Result<()> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut scratch = vec![0.0f32; c * plane];
    for b in 0..n {
        let dy = rng.below(2 * pad + 1) as isize - pad as isize;
        let dx = rng.below(2 * pad + 1) as isize - pad as isize;
        let flip = rng.below(2) == 1;
        let img = &mut x.data_mut()[b * c * plane..(b + 1) * c * plane];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let sj = if flip { w - 1 - j } else { j } as isize + dx;
                    let si = i as isize + dy;
                    scratch[ch * plane + i * w + j] = if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                        img[ch * plane + si as usize * w + sj as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
        img.copy_from_slice(&scratch);
    }
    Ok(())
}

fn parse_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), reason: reason.into() }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| parse_err(path, e.to_string()))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.len() < 16 {
        return Err(parse_err(path, format!("{} bytes is too short for an IDX image header", bytes.len())));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES {
        return Err(parse_err(path, format!("magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let (n, r, c) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    let want = 16 + n * r * c;
    if bytes.len() != want || n == 0 || r == 0 || c == 0 {
        return Err(parse_err(path, format!("{} bytes for {n} images of {r}x{c}, expected {want}", bytes.len())));
    }
    Ok((n, r, c, bytes[16..].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    if bytes.len() < 8 {
        return Err(parse_err(path, format!("{} bytes is too short for an IDX label header", bytes.len())));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_LABELS {
        return Err(parse_err(path, format!("magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(parse_err(path, format!("{} bytes for {n} labels", bytes.len())));
    }
    Ok(bytes[8..].to_vec())
}

/// Standard MNIST file names for `split` under `dir`.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = if split == Split::Test { "t10k" } else { "train" };
    (dir.join(format!("{prefix}-images-idx3-ubyte")), dir.join(format!("{prefix}-labels-idx1-ubyte")))
}

/// Loads one MNIST split, scaled to [0, 1] and then standardized with its
/// own statistics.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (ip, lp) = mnist_paths(dir, split);
    let (n, r, c, pixels) = parse_idx_images(&read(&ip)?, &ip)?;
    let labels = parse_idx_labels(&read(&lp)?, &lp)?;
    if labels.len() != n {
        return Err(parse_err(&lp, format!("{} labels for {n} images", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 9) {
        return Err(parse_err(&lp, format!("label {l} outside 0..=9")));
    }
    let images = Tensor::from_vec(&[n, 1, r, c], pixels.iter().map(|&p| p as f32 / 255.0).collect())?;
    let mut ds = Dataset::new(images, labels.into_iter().map(usize::from).collect(), 10, split)?;
    let stats = ds.channel_stats();
    ds.standardize(&stats)?;
    Ok(ds)
}

/// Parses concatenated CIFAR-10 records (label byte + 3072 channel-major pixels).
pub fn parse_cifar_records(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(parse_err(path, format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len())));
    }
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut pixels = Vec::with_capacity(bytes.len() / CIFAR_RECORD * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(parse_err(path, format!("label {} outside 0..=9", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
    }
    Ok((labels, pixels))
}

fn load_cifar_files(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for p in paths {
        let (l, px) = parse_cifar_records(&read(p)?, p)?;
        labels.extend(l);
        pixels.extend(px);
    }
    let images = Tensor::from_vec(&[labels.len(), 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    Dataset::new(images, labels, 10, split)
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin`, both standardized
/// with the train split's per-channel statistics.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train_paths: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let mut train = load_cifar_files(&train_paths, Split::Train)?;
    let mut test = load_cifar_files(&[dir.join("test_batch.bin")], Split::Test)?;
    let stats = train.channel_stats();
    train.standardize(&stats)?;
    test.standardize(&stats)?;
    Ok((train, test))
}
