//! Datasets, color conversion, standardization and batching.

mod cifar;
mod synthetic;

pub use cifar::{
    load_cifar10, load_cifar100, read_cifar100_dir, read_cifar10_dir, read_record_file,
    records_to_tensor, serialize_records, CifarFormat, RawRecord, CIFAR10_BATCH_BYTES, PIXELS,
};
pub use synthetic::{synthetic_dataset, synthetic_split};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor4;

pub const IMAGE_DIMS: [usize; 3] = [3, 32, 32];
const SHUFFLE_SALT: u64 = 0x5348_5546;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Colorspace {
    #[default]
    Yuv,
    Rgb,
}

impl FromStr for Colorspace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "yuv" => Ok(Colorspace::Yuv),
            "rgb" => Ok(Colorspace::Rgb),
            other => Err(Error::InvalidArgument(format!(
                "unknown colorspace `{other}`"
            ))),
        }
    }
}

impl fmt::Display for Colorspace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Colorspace::Yuv => "yuv",
            Colorspace::Rgb => "rgb",
        })
    }
}

/// BT.601 full-range RGB → YUV.
pub fn rgb_to_yuv_pixel([r, g, b]: [f64; 3]) -> [f64; 3] {
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    [y, 0.492 * (b - y), 0.877 * (r - y)]
}

pub fn yuv_to_rgb_pixel([y, u, v]: [f64; 3]) -> [f64; 3] {
    let r = y + v / 0.877;
    let b = y + u / 0.492;
    let g = (y - 0.299 * r - 0.114 * b) / 0.587;
    [r, g, b]
}

fn map_pixels<T: Scalar>(image: &Tensor4<T>, f: fn([f64; 3]) -> [f64; 3]) -> Result<Tensor4<T>> {
    if image.channels() != 3 {
        return Err(Error::shape(
            "color conversion",
            format!("{} channels", image.channels()),
            "3 channels",
        ));
    }
    let hw = image.height() * image.width();
    let mut out = image.clone();
    for n in 0..image.batch() {
        let item = out.item_mut(n);
        for p in 0..hw {
            let px = [
                item[p].as_f64(),
                item[hw + p].as_f64(),
                item[2 * hw + p].as_f64(),
            ];
            let [a, b, c] = f(px);
            item[p] = T::of(a);
            item[hw + p] = T::of(b);
            item[2 * hw + p] = T::of(c);
        }
    }
    Ok(out)
}

/// Planar RGB image batch → YUV.
pub fn rgb_to_yuv<T: Scalar>(image: &Tensor4<T>) -> Result<Tensor4<T>> {
    map_pixels(image, rgb_to_yuv_pixel)
}

pub fn yuv_to_rgb<T: Scalar>(image: &Tensor4<T>) -> Result<Tensor4<T>> {
    map_pixels(image, yuv_to_rgb_pixel)
}

/// Per-channel mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn compute<T: Scalar>(images: &Tensor4<T>) -> Self {
        let [n, c, h, w] = images.dims();
        let hw = h * w;
        let count = (n * hw).max(1) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for (ch, plane) in images.item(b).chunks(hw).enumerate() {
                mean[ch] += plane.iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for b in 0..n {
            for (ch, plane) in images.item(b).chunks(hw).enumerate() {
                var[ch] += plane
                    .iter()
                    .map(|v| (v.as_f64() - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        let std = var.iter().map(|v| (v / count).sqrt()).collect();
        Self { mean, std }
    }

    /// `(x − mean) / std` per channel; constant channels are only centered.
    pub fn apply<T: Scalar>(&self, images: &mut Tensor4<T>) -> Result<()> {
        let [n, c, h, w] = images.dims();
        if c != self.mean.len() {
            return Err(Error::shape(
                "standardization",
                format!("{c} channels"),
                format!("stats for {}", self.mean.len()),
            ));
        }
        let hw = h * w;
        for b in 0..n {
            for (ch, plane) in images.item_mut(b).chunks_mut(hw).enumerate() {
                let inv = if self.std[ch] > 0.0 {
                    1.0 / self.std[ch]
                } else {
                    1.0
                };
                let m = self.mean[ch];
                plane
                    .iter_mut()
                    .for_each(|v| *v = T::of((v.as_f64() - m) * inv));
            }
        }
        Ok(())
    }
}

/// Labelled images, standardized with the statistics in `stats`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub images: Tensor4<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Train-split statistics applied to these images.
    pub stats: ChannelStats,
    pub split: Split,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the given records into one batch tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor4<T>, Vec<usize>)> {
        let [_, c, h, w] = self.images.dims();
        let item = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * item);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "record {i} out of range for {} records",
                    self.len()
                )));
            }
            data.extend_from_slice(self.images.item(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor4::new([indices.len(), c, h, w], data)?, labels))
    }

    /// Records in storage order, `batch` at a time (short final batch kept).
    pub fn sequential(
        &self,
        batch: usize,
    ) -> impl Iterator<Item = Result<(Tensor4<T>, Vec<usize>)>> + '_ {
        let batch = batch.max(1);
        (0..self.len()).step_by(batch).map(move |start| {
            let idx: Vec<usize> = (start..(start + batch).min(self.len())).collect();
            self.gather(&idx)
        })
    }

    /// Per-class record counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }
}

/// Epoch permutation of `0..n` derived from `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive2(seed, SHUFFLE_SALT, epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Shuffled mini-batches for one epoch.
pub struct Batches<'a, T> {
    dataset: &'a Dataset<T>,
    order: Vec<usize>,
    batch: usize,
    pos: usize,
}

impl<T: Scalar> Batches<'_, T> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch)
    }
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = Result<(Tensor4<T>, Vec<usize>)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let out = self.dataset.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(out)
    }
}

/// Every record exactly once in an order fixed by `(seed, epoch)`; the
/// final batch is short when `batch` does not divide the dataset size.
pub fn batches<T: Scalar>(
    dataset: &Dataset<T>,
    batch: usize,
    seed: u64,
    epoch: usize,
) -> Result<Batches<'_, T>> {
    if batch == 0 || batch > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch} must be in 1..={}",
            dataset.len()
        )));
    }
    Ok(Batches {
        dataset,
        order: epoch_order(dataset.len(), seed, epoch),
        batch,
        pos: 0,
    })
}

/// Builds train and validation datasets from raw `[0, 1]` RGB images:
/// optional YUV conversion, then standardization with train statistics.
pub fn prepare<T: Scalar>(
    train: (Tensor4<T>, Vec<usize>),
    val: (Tensor4<T>, Vec<usize>),
    num_classes: usize,
    colorspace: Colorspace,
) -> Result<(Dataset<T>, Dataset<T>)> {
    let convert = |t: Tensor4<T>| match colorspace {
        Colorspace::Yuv => rgb_to_yuv(&t),
        Colorspace::Rgb => Ok(t),
    };
    let mut train_images = convert(train.0)?;
    let mut val_images = convert(val.0)?;
    for labels in [&train.1, &val.1] {
        if let Some((record, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                record,
                label,
                classes: num_classes,
            });
        }
    }
    let stats = ChannelStats::compute(&train_images);
    stats.apply(&mut train_images)?;
    stats.apply(&mut val_images)?;
    Ok((
        Dataset {
            images: train_images,
            labels: train.1,
            num_classes,
            stats: stats.clone(),
            split: Split::Train,
        },
        Dataset {
            images: val_images,
            labels: val.1,
            num_classes,
            stats,
            split: Split::Validation,
        },
    ))
}
