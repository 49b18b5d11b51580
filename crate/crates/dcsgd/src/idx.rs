//! Reader and writer for the IDX image/label container (the MNIST wire
//! format): big-endian magic + dimension header followed by raw u8 payload.
//!
//! Images load as flattened rows scaled to [0, 1]; labels load as class
//! indices. The writer emits the same two-file layout so generated datasets
//! round-trip through the exact reader used for real ones.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, WriteBytesExt};
use ndarray::Array2;

use crate::gradients::{Dataset, GradientError, Labels};

/// Magic number for a rank-3 u8 tensor (image sets).
pub const IMAGES_MAGIC: u32 = 0x0000_0803;
/// Magic number for a rank-1 u8 tensor (label sets).
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Errors while decoding or encoding IDX files.
#[derive(Debug)]
pub enum IdxError {
    Io(io::Error),
    /// The leading magic number did not identify the expected tensor kind.
    BadMagic { path: String, expected: u32, found: u32 },
    /// The file ended before header or payload was complete.
    Truncated { path: String, expected_bytes: usize, found_bytes: usize },
    /// Image and label files disagree on the number of samples.
    CountMismatch { images: usize, labels: usize },
    /// A label byte at or above the class count.
    LabelOutOfRange { index: usize, label: u8 },
    /// The decoded payload failed dataset validation.
    Dataset(GradientError),
}

impl fmt::Display for IdxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IdxError::Io(e) => write!(f, "i/o error: {e}"),
            IdxError::BadMagic { path, expected, found } => {
                write!(f, "{path}: bad magic {found:#010x}, expected {expected:#010x}")
            }
            IdxError::Truncated { path, expected_bytes, found_bytes } => {
                write!(f, "{path}: truncated, expected {expected_bytes} bytes, found {found_bytes}")
            }
            IdxError::CountMismatch { images, labels } => {
                write!(f, "count mismatch: {images} images vs {labels} labels")
            }
            IdxError::LabelOutOfRange { index, label } => {
                write!(f, "label {label} at sample {index} outside supported range")
            }
            IdxError::Dataset(e) => write!(f, "decoded dataset invalid: {e}"),
        }
    }
}

impl std::error::Error for IdxError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            IdxError::Io(e) => Some(e),
            IdxError::Dataset(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for IdxError {
    fn from(e: io::Error) -> Self {
        IdxError::Io(e)
    }
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn read_u32s(bytes: &[u8], count: usize, path: &Path) -> Result<Vec<u32>, IdxError> {
    let need = 4 * count;
    if bytes.len() < need {
        return Err(IdxError::Truncated {
            path: path_str(path),
            expected_bytes: need,
            found_bytes: bytes.len(),
        });
    }
    Ok((0..count).map(|i| BigEndian::read_u32(&bytes[4 * i..4 * i + 4])).collect())
}

/// Decodes an image file into an n×(rows·cols) matrix scaled to [0, 1].
pub fn read_idx_images(path: &Path) -> Result<Array2<f64>, IdxError> {
    let bytes = fs::read(path)?;
    let magic = read_u32s(&bytes, 1, path)?[0];
    if magic != IMAGES_MAGIC {
        return Err(IdxError::BadMagic { path: path_str(path), expected: IMAGES_MAGIC, found: magic });
    }
    let header = read_u32s(&bytes, 4, path)?;
    let (n, rows, cols) = (header[1] as usize, header[2] as usize, header[3] as usize);
    let pixels = n * rows * cols;
    let expected = 16 + pixels;
    if bytes.len() != expected {
        return Err(IdxError::Truncated {
            path: path_str(path),
            expected_bytes: expected,
            found_bytes: bytes.len(),
        });
    }
    let mut out = Array2::zeros((n, rows * cols));
    for (v, &b) in out.iter_mut().zip(&bytes[16..]) {
        *v = b as f64 / 255.0;
    }
    Ok(out)
}

/// Decodes a label file into class indices.
pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>, IdxError> {
    let bytes = fs::read(path)?;
    let magic = read_u32s(&bytes, 1, path)?[0];
    if magic != LABELS_MAGIC {
        return Err(IdxError::BadMagic { path: path_str(path), expected: LABELS_MAGIC, found: magic });
    }
    let header = read_u32s(&bytes, 2, path)?;
    let n = header[1] as usize;
    let expected = 8 + n;
    if bytes.len() != expected {
        return Err(IdxError::Truncated {
            path: path_str(path),
            expected_bytes: expected,
            found_bytes: bytes.len(),
        });
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Loads an image/label file pair into a validated classification dataset.
/// Labels above `max_classes − 1` are rejected (10 covers digit data).
pub fn dataset_from_idx(
    images_path: &Path,
    labels_path: &Path,
    max_classes: usize,
) -> Result<Dataset, IdxError> {
    let features = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if features.nrows() != labels.len() {
        return Err(IdxError::CountMismatch { images: features.nrows(), labels: labels.len() });
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= max_classes) {
        return Err(IdxError::LabelOutOfRange { index, label: label as u8 });
    }
    Dataset::new(features, Labels::Classes(labels)).map_err(IdxError::Dataset)
}

/// Writes an image file from features in [0, 1]; each value is quantized to
/// the nearest byte. `rows·cols` must equal the feature dimension.
pub fn write_idx_images(
    path: &Path,
    features: &Array2<f64>,
    rows: usize,
    cols: usize,
) -> Result<(), IdxError> {
    assert_eq!(rows * cols, features.ncols(), "image shape must match feature dimension");
    let mut buf = Vec::with_capacity(16 + features.len());
    buf.write_u32::<BigEndian>(IMAGES_MAGIC)?;
    buf.write_u32::<BigEndian>(features.nrows() as u32)?;
    buf.write_u32::<BigEndian>(rows as u32)?;
    buf.write_u32::<BigEndian>(cols as u32)?;
    for &v in features.iter() {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    atomic_write(path, &buf)
}

/// Writes a label file from class indices (must each fit in a byte).
pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<(), IdxError> {
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.write_u32::<BigEndian>(LABELS_MAGIC)?;
    buf.write_u32::<BigEndian>(labels.len() as u32)?;
    for (index, &l) in labels.iter().enumerate() {
        if l > u8::MAX as usize {
            return Err(IdxError::LabelOutOfRange { index, label: u8::MAX });
        }
        buf.push(l as u8);
    }
    atomic_write(path, &buf)
}

/// Writes through a temp file and rename so readers never see partial data.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IdxError> {
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp)?;
    file.write_all(bytes)?;
    file.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}
