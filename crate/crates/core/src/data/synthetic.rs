//! Class-conditional Gaussian-blob images for desk-scale experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{prepare, ChannelStats, Colorspace, Dataset, Split, IMAGE_DIMS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor4;

const PROTOTYPE_SALT: u64 = 0xB10B;
const BLOB_SIGMA: f64 = 5.0;
const JITTER: f64 = 2.0;
const NOISE: f64 = 0.1;

struct Prototype {
    center: (f64, f64),
    color: [f64; 3],
}

fn prototypes(classes: usize, seed: u64) -> Vec<Prototype> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, PROTOTYPE_SALT));
    (0..classes)
        .map(|_| Prototype {
            center: (rng.random_range(8.0..24.0), rng.random_range(8.0..24.0)),
            color: [rng.random(), rng.random(), rng.random()],
        })
        .collect()
}

/// Raw images near `[0, 1]`: a mid-gray field with one colored blob whose
/// position and color depend on the class, plus per-sample jitter and noise.
/// Labels cycle through the classes, so counts differ by at most one.
fn generate<T: Scalar>(
    n: usize,
    protos: &[Prototype],
    sample_seed: u64,
) -> Result<(Tensor4<T>, Vec<usize>)> {
    let [c, h, w] = IMAGE_DIMS;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let noise = Normal::new(0.0, NOISE).expect("valid noise std");
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % protos.len();
        let p = &protos[label];
        let cx = p.center.0 + rng.random_range(-JITTER..JITTER);
        let cy = p.center.1 + rng.random_range(-JITTER..JITTER);
        let amp = rng.random_range(0.8..1.2);
        for &col in &p.color {
            for y in 0..h {
                for x in 0..w {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    let blob = (-d2 / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp();
                    let v = 0.5 + amp * (col - 0.5) * blob + noise.sample(&mut rng);
                    data.push(T::of(v));
                }
            }
        }
        labels.push(label);
    }
    Ok((Tensor4::new([n, c, h, w], data)?, labels))
}

fn check(n: usize, classes: usize) -> Result<()> {
    if classes < 2 || n < classes {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs classes >= 2 and n >= classes, got n={n}, classes={classes}"
        )));
    }
    Ok(())
}

/// `n` standardized RGB images over `classes` classes.
pub fn synthetic_dataset<T: Scalar>(n: usize, classes: usize, seed: u64) -> Result<Dataset<T>> {
    check(n, classes)?;
    let protos = prototypes(classes, seed);
    let (mut images, labels) = generate(n, &protos, seed::derive(seed, 1))?;
    let stats = ChannelStats::compute(&images);
    stats.apply(&mut images)?;
    Ok(Dataset {
        images,
        labels,
        num_classes: classes,
        stats,
        split: Split::Train,
    })
}

/// Train and validation sets drawn from the same class prototypes with
/// independent samples; both standardized with train statistics.
pub fn synthetic_split<T: Scalar>(
    n_train: usize,
    n_val: usize,
    classes: usize,
    seed: u64,
    colorspace: Colorspace,
) -> Result<(Dataset<T>, Dataset<T>)> {
    check(n_train, classes)?;
    let protos = prototypes(classes, seed);
    let train = generate(n_train, &protos, seed::derive(seed, 1))?;
    let val = generate(n_val, &protos, seed::derive(seed, 2))?;
    prepare(train, val, classes, colorspace)
}
