//! Readers for the binary CIFAR-10 and CIFAR-100 distributions.

use std::fs;
use std::path::{Path, PathBuf};

use super::{prepare, Colorspace, Dataset, IMAGE_DIMS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Pixel bytes per record: 1024 R, then 1024 G, then 1024 B, row-major.
pub const PIXELS: usize = 3 * 32 * 32;
pub const CIFAR10_BATCH_BYTES: u64 = 10_000 * 3073;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarFormat {
    /// `<label> <3072 pixels>`
    Cifar10,
    /// `<coarse label> <fine label> <3072 pixels>`
    Cifar100,
}

impl CifarFormat {
    pub fn record_len(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 1 + PIXELS,
            CifarFormat::Cifar100 => 2 + PIXELS,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 10,
            CifarFormat::Cifar100 => 100,
        }
    }

    fn subdir(self) -> &'static str {
        match self {
            CifarFormat::Cifar10 => "cifar-10-batches-bin",
            CifarFormat::Cifar100 => "cifar-100-binary",
        }
    }

    /// `(file name, record count)` of the train files, then the test file.
    fn files(self) -> (Vec<(String, usize)>, (String, usize)) {
        match self {
            CifarFormat::Cifar10 => (
                (1..=5)
                    .map(|i| (format!("data_batch_{i}.bin"), 10_000))
                    .collect(),
                ("test_batch.bin".to_string(), 10_000),
            ),
            CifarFormat::Cifar100 => (
                vec![("train.bin".to_string(), 50_000)],
                ("test.bin".to_string(), 10_000),
            ),
        }
    }
}

/// One undecoded record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    /// CIFAR-100 coarse label; kept only for re-serialization.
    pub coarse: Option<u8>,
    /// Class label (the fine label for CIFAR-100).
    pub label: u8,
    pub pixels: Vec<u8>,
}

fn parse_records(path: &Path, bytes: &[u8], format: CifarFormat) -> Result<Vec<RawRecord>> {
    let len = format.record_len();
    let max = (format.num_classes() - 1) as u8;
    bytes
        .chunks_exact(len)
        .enumerate()
        .map(|(record, chunk)| {
            let (coarse, label, pixels) = match format {
                CifarFormat::Cifar10 => (None, chunk[0], &chunk[1..]),
                CifarFormat::Cifar100 => (Some(chunk[0]), chunk[1], &chunk[2..]),
            };
            if label > max {
                return Err(Error::BadLabel {
                    path: path.to_path_buf(),
                    record,
                    label,
                    max,
                });
            }
            Ok(RawRecord {
                coarse,
                label,
                pixels: pixels.to_vec(),
            })
        })
        .collect()
}

/// Reads a batch file that must hold exactly `records` records.
pub fn read_record_file(
    path: &Path,
    format: CifarFormat,
    records: usize,
) -> Result<Vec<RawRecord>> {
    let expected = (records * format.record_len()) as u64;
    let actual = fs::metadata(path)?.len();
    if actual != expected {
        return Err(Error::FileSize {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    parse_records(path, &fs::read(path)?, format)
}

/// Inverse of parsing: the original file bytes.
pub fn serialize_records(records: &[RawRecord], format: CifarFormat) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * format.record_len());
    for r in records {
        if format == CifarFormat::Cifar100 {
            out.push(r.coarse.unwrap_or(0));
        }
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    out
}

fn resolve_dir(dir: &Path, format: CifarFormat) -> PathBuf {
    let (train, _) = format.files();
    if dir.join(&train[0].0).exists() {
        dir.to_path_buf()
    } else {
        dir.join(format.subdir())
    }
}

fn read_dir(dir: &Path, format: CifarFormat) -> Result<(Vec<RawRecord>, Vec<RawRecord>)> {
    let dir = resolve_dir(dir, format);
    let (train_files, (test_file, test_n)) = format.files();
    let mut train = Vec::new();
    for (name, n) in train_files {
        train.extend(read_record_file(&dir.join(name), format, n)?);
    }
    let test = read_record_file(&dir.join(test_file), format, test_n)?;
    Ok((train, test))
}

/// Raw train (50000) and test (10000) records. Accepts either the directory
/// holding the `.bin` files or its parent.
pub fn read_cifar10_dir(dir: &Path) -> Result<(Vec<RawRecord>, Vec<RawRecord>)> {
    read_dir(dir, CifarFormat::Cifar10)
}

pub fn read_cifar100_dir(dir: &Path) -> Result<(Vec<RawRecord>, Vec<RawRecord>)> {
    read_dir(dir, CifarFormat::Cifar100)
}

/// Pixel bytes scaled to `[0, 1]`.
pub fn records_to_tensor<T: Scalar>(records: &[RawRecord]) -> Result<(Tensor4<T>, Vec<usize>)> {
    let mut data = Vec::with_capacity(records.len() * PIXELS);
    for r in records {
        data.extend(r.pixels.iter().map(|&p| T::of(f64::from(p) / 255.0)));
    }
    let [c, h, w] = IMAGE_DIMS;
    let images = Tensor4::new([records.len(), c, h, w], data)?;
    Ok((
        images,
        records.iter().map(|r| usize::from(r.label)).collect(),
    ))
}

fn load<T: Scalar>(
    format: CifarFormat,
    dir: &Path,
    colorspace: Colorspace,
    limit_train: Option<usize>,
    limit_val: Option<usize>,
) -> Result<(Dataset<T>, Dataset<T>)> {
    let (mut train, mut val) = read_dir(dir, format)?;
    if let Some(n) = limit_train {
        train.truncate(n);
    }
    if let Some(n) = limit_val {
        val.truncate(n);
    }
    prepare(
        records_to_tensor(&train)?,
        records_to_tensor(&val)?,
        format.num_classes(),
        colorspace,
    )
}

/// Train and validation sets, standardized with train statistics. Limits
/// keep the first records of each split.
pub fn load_cifar10<T: Scalar>(
    dir: &Path,
    colorspace: Colorspace,
    limit_train: Option<usize>,
    limit_val: Option<usize>,
) -> Result<(Dataset<T>, Dataset<T>)> {
    load(
        CifarFormat::Cifar10,
        dir,
        colorspace,
        limit_train,
        limit_val,
    )
}

pub fn load_cifar100<T: Scalar>(
    dir: &Path,
    colorspace: Colorspace,
    limit_train: Option<usize>,
    limit_val: Option<usize>,
) -> Result<(Dataset<T>, Dataset<T>)> {
    load(
        CifarFormat::Cifar100,
        dir,
        colorspace,
        limit_train,
        limit_val,
    )
}
