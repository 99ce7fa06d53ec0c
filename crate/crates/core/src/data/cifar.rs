//! CIFAR-10 binary format: records of one label byte followed by 1024 red,
//! 1024 green and 1024 blue bytes, each plane row-major 32×32.

use std::path::Path;

use super::LabeledImage;
use crate::error::{Error, Result};

pub const CIFAR10_CLASSES: usize = 10;
const SIDE: usize = 32;
const CHANNELS: usize = 3;
pub const RECORD_BYTES: usize = 1 + CHANNELS * SIDE * SIDE;

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone)]
pub struct Cifar10 {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

pub fn parse_cifar10_records(bytes: &[u8]) -> Result<Vec<LabeledImage>> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {RECORD_BYTES}-byte records (truncated file?)",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label >= CIFAR10_CLASSES {
                return Err(Error::Format(format!("record {i}: label byte {label} > 9")));
            }
            LabeledImage::new(label, CHANNELS, SIDE, SIDE, rec[1..].to_vec())
        })
        .collect()
}

pub fn read_cifar10_file(path: &Path) -> Result<Vec<LabeledImage>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10_records(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads the five training batches and the test batch from `root`. The
/// directory may also be the parent of the usual `cifar-10-batches-bin` folder.
pub fn load_cifar10(root: &Path) -> Result<Cifar10> {
    let nested = root.join("cifar-10-batches-bin");
    let dir = if nested.is_dir() { nested } else { root.to_path_buf() };
    let mut train = Vec::with_capacity(50_000);
    for f in TRAIN_FILES {
        train.extend(read_cifar10_file(&dir.join(f))?);
    }
    let test = read_cifar10_file(&dir.join(TEST_FILE))?;
    Ok(Cifar10 { train, test })
}
