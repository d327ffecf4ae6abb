//! Dataset ingestion: MNIST in IDX format, CIFAR-10 in its binary format,
//! validation splits and the CIFAR preprocessing used for training
//! (per-pixel mean subtraction and horizontal-mirror augmentation).

use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad magic number {found} (expected {expected})")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: file truncated ({context})")]
    Truncated { path: String, context: String },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: length {len} is not a multiple of the {record} byte record size")]
    BadRecordSize {
        path: String,
        len: u64,
        record: usize,
    },
    #[error("{path}: label byte {label} exceeds class range at record {record}")]
    LabelOutOfRange {
        path: String,
        label: u8,
        record: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("validation count {requested} is not smaller than the set size {available}")]
    ValidationTooLarge { requested: usize, available: usize },
}

/// Images as a rank-4 tensor `(n, channels, height, width)` plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub name: String,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(height, width, channels)` of one sample.
    pub fn sample_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[2], s[3], s[1])
    }

    /// Copies the samples at `indices` into a fresh batch tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        let s = self.images.shape();
        let stride: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let mut shape = s.to_vec();
        shape[0] = indices.len();
        (
            Tensor::from_vec(&shape, data).expect("sized by construction"),
            labels,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitConfig {
    pub validation_count: usize,
    pub split_seed: u64,
}

const IDX_IMAGE_MAGIC: u32 = 2051;
const IDX_LABEL_MAGIC: u32 = 2049;
const CIFAR_RECORD_BYTES: usize = 3073;

fn open(path: &Path) -> Result<BufReader<File>, DataError> {
    File::open(path).map(BufReader::new).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn read_u32_be(r: &mut impl Read, path: &Path, context: &str) -> Result<u32, DataError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| DataError::Truncated {
        path: path.display().to_string(),
        context: context.to_string(),
    })?;
    Ok(u32::from_be_bytes(buf))
}

fn read_bytes(r: &mut impl Read, n: usize, path: &Path, context: &str) -> Result<Vec<u8>, DataError> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| DataError::Truncated {
        path: path.display().to_string(),
        context: context.to_string(),
    })?;
    Ok(buf)
}

/// Loads an MNIST-style IDX image/label file pair. Pixels are scaled from
/// bytes to reals in `[0, 1]`; no other preprocessing is applied.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledSet, DataError> {
    let mut ir = open(images_path)?;
    let magic = read_u32_be(&mut ir, images_path, "image header")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.display().to_string(),
            found: magic,
            expected: IDX_IMAGE_MAGIC,
        });
    }
    let count = read_u32_be(&mut ir, images_path, "image header")? as usize;
    let rows = read_u32_be(&mut ir, images_path, "image header")? as usize;
    let cols = read_u32_be(&mut ir, images_path, "image header")? as usize;
    let pixels = read_bytes(&mut ir, count * rows * cols, images_path, "pixel data")?;

    let mut lr = open(labels_path)?;
    let magic = read_u32_be(&mut lr, labels_path, "label header")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.display().to_string(),
            found: magic,
            expected: IDX_LABEL_MAGIC,
        });
    }
    let label_count = read_u32_be(&mut lr, labels_path, "label header")? as usize;
    if label_count != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let labels = read_bytes(&mut lr, label_count, labels_path, "label data")?;

    let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(LabeledSet {
        images: Tensor::from_vec(&[count, 1, rows, cols], data)
            .map_err(|e| DataError::ShapeMismatch(e.to_string()))?,
        labels,
        name: "mnist".to_string(),
    })
}

/// Loads one or more CIFAR-10 binary batch files. Each record is a label
/// byte followed by 3072 pixel bytes in R, G, B planes.
pub fn load_cifar10_bin(batch_paths: &[impl AsRef<Path>]) -> Result<LabeledSet, DataError> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in batch_paths {
        let path = p.as_ref();
        let meta_len = std::fs::metadata(path)
            .map_err(|e| DataError::Io {
                path: path.display().to_string(),
                source: e,
            })?
            .len();
        if meta_len % CIFAR_RECORD_BYTES as u64 != 0 {
            return Err(DataError::BadRecordSize {
                path: path.display().to_string(),
                len: meta_len,
                record: CIFAR_RECORD_BYTES,
            });
        }
        let mut r = open(path)?;
        let records = (meta_len / CIFAR_RECORD_BYTES as u64) as usize;
        for rec in 0..records {
            let bytes = read_bytes(&mut r, CIFAR_RECORD_BYTES, path, "record")?;
            if bytes[0] > 9 {
                return Err(DataError::LabelOutOfRange {
                    path: path.display().to_string(),
                    label: bytes[0],
                    record: rec,
                });
            }
            labels.push(bytes[0]);
            data.extend(bytes[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let n = labels.len();
    Ok(LabeledSet {
        images: Tensor::from_vec(&[n, 3, 32, 32], data)
            .map_err(|e| DataError::ShapeMismatch(e.to_string()))?,
        labels,
        name: "cifar10".to_string(),
    })
}

fn mirror_image(src: &[f64], c: usize, h: usize, w: usize, dst: &mut Vec<f64>) {
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            dst.extend(row.iter().rev());
        }
    }
}

/// Subtracts the per-pixel mean of the (unaugmented) training images from
/// every set, then doubles the training set by appending horizontal mirrors.
/// Returns the preprocessed training set, the other sets in order, and the
/// mean image.
pub fn preprocess_cifar(
    train: &LabeledSet,
    others: &[&LabeledSet],
) -> Result<(LabeledSet, Vec<LabeledSet>, Tensor), DataError> {
    let (h, w, c) = train.sample_shape();
    let stride = c * h * w;
    for o in others {
        if o.sample_shape() != (h, w, c) {
            return Err(DataError::ShapeMismatch(format!(
                "set '{}' has sample shape {:?}, training set has {:?}",
                o.name,
                o.sample_shape(),
                (h, w, c)
            )));
        }
    }
    let n = train.len();
    let mut mean = vec![0.0f64; stride];
    for i in 0..n {
        for (m, &v) in mean
            .iter_mut()
            .zip(&train.images.data()[i * stride..(i + 1) * stride])
        {
            *m += v;
        }
    }
    if n > 0 {
        for m in &mut mean {
            *m /= n as f64;
        }
    }

    let subtract = |set: &LabeledSet| -> LabeledSet {
        let mut data = set.images.data().to_vec();
        for i in 0..set.len() {
            for (v, m) in data[i * stride..(i + 1) * stride].iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        LabeledSet {
            images: Tensor::from_vec(set.images.shape(), data).expect("same length"),
            labels: set.labels.clone(),
            name: set.name.clone(),
        }
    };

    let centered = subtract(train);
    let mut data = centered.images.data().to_vec();
    data.reserve(n * stride);
    for i in 0..n {
        mirror_image(
            &centered.images.data()[i * stride..(i + 1) * stride],
            c,
            h,
            w,
            &mut data,
        );
    }
    let mut labels = centered.labels.clone();
    labels.extend_from_slice(&centered.labels);
    let augmented = LabeledSet {
        images: Tensor::from_vec(&[2 * n, c, h, w], data)
            .map_err(|e| DataError::ShapeMismatch(e.to_string()))?,
        labels,
        name: train.name.clone(),
    };
    let processed_others = others.iter().map(|o| subtract(o)).collect();
    let mean_image = Tensor::from_vec(&[c, h, w], mean).expect("sized by construction");
    Ok((augmented, processed_others, mean_image))
}

/// Deterministically shuffles the set by `split_seed` and splits off
/// `validation_count` samples. The two parts are disjoint and exhaustive.
pub fn split_validation(
    set: &LabeledSet,
    cfg: SplitConfig,
) -> Result<(LabeledSet, LabeledSet), DataError> {
    if cfg.validation_count >= set.len() && cfg.validation_count != 0 {
        return Err(DataError::ValidationTooLarge {
            requested: cfg.validation_count,
            available: set.len(),
        });
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut rng = stream_rng(cfg.split_seed, Stream::Shuffle);
    order.shuffle(&mut rng);
    let (val_idx, train_idx) = order.split_at(cfg.validation_count);
    let (train_images, train_labels) = set.gather(train_idx);
    let (val_images, val_labels) = set.gather(val_idx);
    Ok((
        LabeledSet {
            images: train_images,
            labels: train_labels,
            name: set.name.clone(),
        },
        LabeledSet {
            images: val_images,
            labels: val_labels,
            name: format!("{}-val", set.name),
        },
    ))
}
