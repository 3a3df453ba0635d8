//! IDX (MNIST) ingestion and label-sorted non-IID sharding.

use std::fs::File;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use flate2::read::GzDecoder;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const CLASSES: usize = 10;

/// Samples as rows of `features` (pixel intensities in `[0, 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: DMatrix<f64>,
    pub labels: Vec<u8>,
}

impl LabeledDataset {
    pub fn new(features: DMatrix<f64>, labels: Vec<u8>) -> Result<Self> {
        Error::check_len("dataset labels", features.nrows(), labels.len())?;
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= CLASSES) {
            return Err(Error::Dataset(format!("label {bad} is outside 0..{CLASSES}")));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let features = self.features.select_rows(indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self { features, labels }
    }

    pub fn label_histogram(&self) -> [usize; CLASSES] {
        let mut h = [0; CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

/// Reads a file, transparently inflating gzip input.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .map_err(|e| Error::Dataset(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn read_u32(cur: &mut Cursor<&[u8]>, what: &str) -> Result<u32> {
    let offset = cur.position();
    cur.read_u32::<BigEndian>().map_err(|_| Error::Idx {
        offset,
        message: format!("truncated header while reading {what}"),
    })
}

fn expect_magic(cur: &mut Cursor<&[u8]>, expected: u32) -> Result<()> {
    let magic = read_u32(cur, "magic number")?;
    if magic != expected {
        return Err(Error::Idx {
            offset: 0,
            message: format!("bad magic number {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

fn payload<'a>(cur: &Cursor<&'a [u8]>, len: usize) -> Result<&'a [u8]> {
    let start = cur.position() as usize;
    let data = *cur.get_ref();
    if data.len() < start + len {
        return Err(Error::Idx {
            offset: data.len() as u64,
            message: format!("truncated payload: expected {len} bytes after offset {start}"),
        });
    }
    Ok(&data[start..start + len])
}

/// Parses an IDX3 image file into an `n x (rows*cols)` matrix scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<DMatrix<f64>> {
    let mut cur = Cursor::new(bytes);
    expect_magic(&mut cur, IMAGE_MAGIC)?;
    let count = read_u32(&mut cur, "image count")? as usize;
    let rows = read_u32(&mut cur, "row count")? as usize;
    let cols = read_u32(&mut cur, "column count")? as usize;
    let pixels = rows * cols;
    let data = payload(&cur, count * pixels)?;
    Ok(DMatrix::from_fn(count, pixels, |n, p| data[n * pixels + p] as f64 / 255.0))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut cur = Cursor::new(bytes);
    expect_magic(&mut cur, LABEL_MAGIC)?;
    let count = read_u32(&mut cur, "label count")? as usize;
    Ok(payload(&cur, count)?.to_vec())
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let features = parse_idx_images(&read_maybe_gz(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path.as_ref())?)?;
    if features.nrows() != labels.len() {
        return Err(Error::Dataset(format!(
            "{} images but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    LabeledDataset::new(features, labels)
}

/// One node's local dataset together with its indices into the source.
#[derive(Debug, Clone)]
pub struct Shard {
    pub indices: Vec<usize>,
    pub data: LabeledDataset,
}

/// Sorts samples by label (stable) and cuts `nodes` contiguous shards of
/// `shard_size` samples. With `shuffle`, the order inside each label group is
/// permuted first.
pub fn shard_non_iid<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    nodes: usize,
    shard_size: usize,
    shuffle: Option<&mut R>,
) -> Result<Vec<Shard>> {
    if nodes == 0 || shard_size == 0 {
        return Err(Error::Dataset("node count and shard size must be positive".into()));
    }
    let needed = nodes * shard_size;
    if needed > dataset.len() {
        return Err(Error::Dataset(format!(
            "{nodes} shards of {shard_size} need {needed} samples, dataset has {}",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by_key(|&i| dataset.labels[i]);
    if let Some(rng) = shuffle {
        let mut start = 0;
        while start < order.len() {
            let label = dataset.labels[order[start]];
            let end = start + order[start..].iter().take_while(|&&i| dataset.labels[i] == label).count();
            order[start..end].shuffle(rng);
            start = end;
        }
    }
    Ok(order[..needed]
        .chunks(shard_size)
        .map(|chunk| Shard {
            indices: chunk.to_vec(),
            data: dataset.subset(chunk),
        })
        .collect())
}
