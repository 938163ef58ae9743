//! MNIST-format IDX loading and shuffled mini-batches.
//!
//! IDX layout (big-endian): images carry magic `0x00000803` followed by the
//! item count, row count and column count; labels carry magic `0x00000801`
//! followed by the item count. The payload is one unsigned byte per pixel or
//! label. Files ending in `.gz` are transparently decompressed.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

/// Images (one row per example, pixels in `[0, 1]`) with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    images: Matrix,
    labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(images: Matrix, labels: Vec<usize>) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::shape(
                "LabeledSet::new",
                images.shape(),
                (labels.len(), 1),
            ));
        }
        if let Some(i) = images.as_slice().iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument(format!(
                "pixel {} of example {} is outside [0, 1]",
                i % images.cols().max(1),
                i / images.cols().max(1)
            )));
        }
        check_labels(&labels)?;
        Ok(LabeledSet { images, labels })
    }

    pub fn images(&self) -> &Matrix {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.images.cols()
    }

    /// First `n` examples (or all of them if the set is smaller).
    pub fn take(&self, n: usize) -> LabeledSet {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        self.select(&idx)
    }

    pub fn select(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Loads `<prefix>-images-idx3-ubyte` and `<prefix>-labels-idx1-ubyte`
    /// (optionally `.gz`) from `dir`.
    pub fn load_mnist(dir: impl AsRef<Path>, split: Split) -> Result<Self> {
        let dir = dir.as_ref();
        let images = load_idx_images(find_file(dir, split.prefix(), "images-idx3-ubyte")?)?;
        let labels = load_idx_labels(find_file(dir, split.prefix(), "labels-idx1-ubyte")?)?;
        LabeledSet::new(images, labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

fn find_file(dir: &Path, prefix: &str, stem: &str) -> Result<PathBuf> {
    let candidates = [
        format!("{prefix}-{stem}"),
        format!("{prefix}-{stem}.gz"),
        format!("{prefix}-{}", stem.replacen('-', ".", 1)),
        format!("{prefix}-{}.gz", stem.replacen('-', ".", 1)),
    ];
    candidates
        .iter()
        .map(|c| dir.join(c))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Error::io(
                dir.join(&candidates[0]),
                std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
            )
        })
}

fn check_labels(labels: &[usize]) -> Result<()> {
    match labels.iter().position(|&l| l >= NUM_CLASSES) {
        Some(index) => Err(Error::LabelOutOfRange {
            index,
            label: labels[index],
            classes: NUM_CLASSES,
        }),
        None => Ok(()),
    }
}

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    let res = if is_gzip(path) {
        GzDecoder::new(file).read_to_end(&mut bytes)
    } else {
        let mut file = file;
        file.read_to_end(&mut bytes)
    };
    res.map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let res = if is_gzip(path) {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes).and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut file = file;
        file.write_all(bytes)
    };
    res.map_err(|e| Error::io(path, e))
}

struct Header<'a> {
    path: &'a Path,
    bytes: &'a [u8],
}

impl Header<'_> {
    fn u32_at(&self, offset: usize) -> Result<u32> {
        let chunk = self.bytes.get(offset..offset + 4).ok_or(Error::Truncated {
            path: self.path.to_path_buf(),
            expected: offset + 4,
            found: self.bytes.len(),
        })?;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4-byte slice")))
    }

    fn expect_magic(&self, expected: u32) -> Result<()> {
        let found = self.u32_at(0)?;
        if found != expected {
            return Err(Error::BadMagic {
                path: self.path.to_path_buf(),
                expected,
                found,
            });
        }
        Ok(())
    }

    fn payload(&self, start: usize, len: usize) -> Result<&[u8]> {
        let end = start + len;
        if self.bytes.len() < end {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: end,
                found: self.bytes.len(),
            });
        }
        if self.bytes.len() > end {
            return Err(Error::TrailingData {
                path: self.path.to_path_buf(),
                expected: end,
                found: self.bytes.len() - end,
            });
        }
        Ok(&self.bytes[start..end])
    }
}

/// Reads an IDX image file into an `n × (rows·cols)` matrix scaled to `[0, 1]`.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let header = Header { path, bytes: &bytes };
    header.expect_magic(IMAGE_MAGIC)?;
    let n = header.u32_at(4)? as usize;
    let rows = header.u32_at(8)? as usize;
    let cols = header.u32_at(12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Dimensions {
            path: path.to_path_buf(),
            rows,
            cols,
        });
    }
    let pixels = header.payload(16, n * rows * cols)?;
    let data = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Matrix::from_raw(n, rows * cols, data))
}

/// Reads an IDX label file; every label must be a digit class.
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let header = Header { path, bytes: &bytes };
    header.expect_magic(LABEL_MAGIC)?;
    let n = header.u32_at(4)? as usize;
    let labels: Vec<usize> = header.payload(8, n)?.iter().map(|&b| b as usize).collect();
    check_labels(&labels)?;
    Ok(labels)
}

/// Writes images as IDX with the given per-image geometry. Pixels are
/// quantized with `round(v·255)`, so images loaded from IDX round-trip exactly.
pub fn write_idx_images(
    path: impl AsRef<Path>,
    images: &Matrix,
    image_rows: usize,
    image_cols: usize,
) -> Result<()> {
    if image_rows * image_cols != images.cols() {
        return Err(Error::shape(
            "write_idx_images",
            images.shape(),
            (image_rows, image_cols),
        ));
    }
    let mut bytes = Vec::with_capacity(16 + images.as_slice().len());
    for v in [IMAGE_MAGIC, images.rows() as u32, image_rows as u32, image_cols as u32] {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    bytes.extend(
        images
            .as_slice()
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    write_bytes(path.as_ref(), &bytes)
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    check_labels(labels)?;
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend(labels.iter().map(|&l| l as u8));
    write_bytes(path.as_ref(), &bytes)
}

/// One mini-batch: a copy of the selected rows and their labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Matrix,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Splits a shuffled ordering of `set` into batches of `batch_size`; the last
/// batch may be short.
pub fn batches(set: &LabeledSet, batch_size: usize, rng: &mut RngStream) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    if set.is_empty() {
        return Err(Error::Empty("batches"));
    }
    let order = rng.permutation(set.len());
    Ok(order
        .chunks(batch_size)
        .map(|chunk| Batch {
            images: set.images.select_rows(chunk),
            labels: chunk.iter().map(|&i| set.labels[i]).collect(),
            indices: chunk.to_vec(),
        })
        .collect())
}

/// Batches for one epoch, shuffled with a stream derived from `(seed, epoch)`.
pub fn epoch_batches(
    set: &LabeledSet,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Batch>> {
    let mut rng = RngStream::new(seed).fork(epoch as u64);
    batches(set, batch_size, &mut rng)
}
