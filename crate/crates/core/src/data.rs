//! MNIST IDX ingestion, global normalization and synthetic fixtures.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Global pixel statistics applied as `(x - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization { mean: 0.0, std: 1.0 };

    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Normalization {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, 1, 28, 28]`
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    normalization: Normalization,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, normalization: Normalization) -> Result<Self> {
        if images.shape()[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Argument(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn sample_len(&self) -> usize {
        self.images.len() / self.len()
    }

    /// Copies the selected samples into a contiguous batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let s = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * s);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * s..(i + 1) * s]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_vec(shape, data).expect("gathered shape"), labels)
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        self.subset((0..n.min(self.len())).collect())
    }

    /// The first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        (self.subset((0..n).collect()), self.subset((n..self.len()).collect()))
    }

    fn subset(&self, idx: Vec<usize>) -> Dataset {
        let (images, labels) = self.gather(&idx);
        Dataset {
            images,
            labels,
            classes: self.classes,
            normalization: self.normalization,
        }
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: "file truncated inside the header".into(),
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        });
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() < need {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (16 + body.len()) as u64,
            message: format!("expected {need} pixel bytes, found {}", body.len()),
        });
    }
    let pixels = body[..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((n, rows, cols, pixels))
}

fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        });
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (8 + body.len()) as u64,
            message: format!("expected {n} labels, found {}", body.len()),
        });
    }
    body[..n]
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l > 9 {
                Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: (8 + i) as u64,
                    message: format!("label {l} outside 0..=9"),
                })
            } else {
                Ok(usize::from(l))
            }
        })
        .collect()
}

/// Reads an IDX image/label pair, scales pixels to `[0, 1]`, then applies
/// `normalization` or, when `None`, the pair's own global statistics.
pub fn load_mnist_idx(
    images_path: &Path,
    labels_path: &Path,
    normalization: Option<Normalization>,
) -> Result<Dataset> {
    let (n, rows, cols, mut pixels) = parse_images(&read_file(images_path)?, images_path)?;
    let labels = parse_labels(&read_file(labels_path)?, labels_path)?;
    if labels.len() != n {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: 4,
            message: format!("{} labels for {n} images", labels.len()),
        });
    }
    let norm = normalization.unwrap_or_else(|| Normalization::of(&pixels));
    for p in &mut pixels {
        *p = (*p - norm.mean) / norm.std;
    }
    let images = Tensor::from_vec(vec![n, 1, rows, cols], pixels)?;
    Dataset::new(images, labels, 10, norm)
}

/// Paths of the four standard files inside `dir`.
pub fn mnist_paths(dir: &Path) -> [PathBuf; 4] {
    [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS].map(|f| dir.join(f))
}

/// Train and test splits, both normalized with the training statistics.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let [ti, tl, vi, vl] = mnist_paths(dir);
    let train = load_mnist_idx(&ti, &tl, None)?;
    let test = load_mnist_idx(&vi, &vl, Some(train.normalization()))?;
    Ok((train, test))
}

/// Gaussian blobs shaped like MNIST: each class has a random center, and
/// samples are the center plus unit Gaussian noise per pixel.
pub fn synthetic_blobs(n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || classes == 0 {
        return Err(Error::Argument("synthetic_blobs needs n > 0 and classes > 0".into()));
    }
    const PIXELS: usize = 28 * 28;
    const CENTER_SCALE: f64 = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..classes * PIXELS)
        .map(|_| CENTER_SCALE * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * PIXELS);
    for _ in 0..n {
        let label = rng.random_range(0..classes);
        labels.push(label);
        let center = &centers[label * PIXELS..(label + 1) * PIXELS];
        data.extend(center.iter().map(|c| c + rng.sample::<f64, _>(StandardNormal)));
    }
    Dataset::new(
        Tensor::from_vec(vec![n, 1, 28, 28], data)?,
        labels,
        classes,
        Normalization::IDENTITY,
    )
}
