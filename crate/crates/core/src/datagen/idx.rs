//! Reader for the big-endian IDX tensor format used by MNIST.
//!
//! Only the two layouts found in image classification sets are supported:
//! unsigned-byte 3-d tensors (`0x00000803`, images) and unsigned-byte vectors
//! (`0x00000801`, labels).

use std::path::Path;

use super::{DataError, Dataset, Targets};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// Pixels scaled to `[0, 1]`, one row of `rows·cols` values per image.
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        pixels: Vec<f64>,
    },
    Labels(Vec<u8>),
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], DataError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| DataError::Parse {
            offset: self.bytes.len(),
            reason: format!("truncated {what}: need {n} bytes at offset {}", self.pos),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData, DataError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.u32("magic number")?;
    match magic {
        IMAGES_MAGIC => {
            let count = cur.u32("image count")? as usize;
            let rows = cur.u32("row count")? as usize;
            let cols = cur.u32("column count")? as usize;
            let len = count
                .checked_mul(rows)
                .and_then(|x| x.checked_mul(cols))
                .ok_or(DataError::Parse { offset: 4, reason: "dimensions overflow".into() })?;
            let raw = cur.take(len, "pixel data")?;
            let pixels = raw.iter().map(|&p| f64::from(p) / 255.0).collect();
            trailing(&cur)?;
            Ok(IdxData::Images { count, rows, cols, pixels })
        }
        LABELS_MAGIC => {
            let count = cur.u32("label count")? as usize;
            let labels = cur.take(count, "label data")?.to_vec();
            trailing(&cur)?;
            Ok(IdxData::Labels(labels))
        }
        other => Err(DataError::Parse { offset: 0, reason: format!("unsupported magic 0x{other:08x}") }),
    }
}

fn trailing(cur: &Cursor<'_>) -> Result<(), DataError> {
    if cur.pos == cur.bytes.len() {
        Ok(())
    } else {
        Err(DataError::Parse {
            offset: cur.pos,
            reason: format!("{} unexpected trailing bytes", cur.bytes.len() - cur.pos),
        })
    }
}

pub fn load_idx(path: &Path) -> Result<IdxData, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    parse_idx(&bytes)
}

/// Pairs an image file with its label file. The class count is one more than
/// the largest label.
pub fn load_idx_dataset(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let IdxData::Images { count, rows, cols, pixels } = load_idx(images)? else {
        return Err(DataError::Config(format!("{} is not an image file", images.display())));
    };
    let IdxData::Labels(raw) = load_idx(labels)? else {
        return Err(DataError::Config(format!("{} is not a label file", labels.display())));
    };
    if raw.len() != count {
        return Err(DataError::Config(format!("{count} images but {} labels", raw.len())));
    }
    let labels: Vec<usize> = raw.iter().map(|&l| usize::from(l)).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    Ok(Dataset { features: pixels, dims: rows * cols, targets: Targets::Labels { labels, classes } })
}
