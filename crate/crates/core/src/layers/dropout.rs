use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Mode;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Inverted dropout: survivors are scaled by 1/(1−rate) at train time so
/// evaluation is the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutLayer {
    pub rate: f64,
}

impl DropoutLayer {
    pub fn new(rate: f64) -> Result<Self> {
        check_rate(rate)?;
        Ok(Self { rate })
    }
}

/// Per-activation multiplier (0 or 1/(1−rate)) applied in the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<T> {
    pub dims: [usize; 4],
    pub scale: Vec<T>,
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// Applies dropout. Returns `None` for the mask in eval mode or when `rate == 0`.
pub fn dropout<T: Scalar>(
    input: &Tensor4<T>,
    rate: f64,
    mode: Mode,
    seed: u64,
) -> Result<(Tensor4<T>, Option<DropoutMask<T>>)> {
    check_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::of(1.0 / (1.0 - rate));
    let scale: Vec<T> = (0..input.len())
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let out = input
        .data()
        .iter()
        .zip(&scale)
        .map(|(&x, &s)| x * s)
        .collect();
    Ok((
        Tensor4::new(input.dims(), out)?,
        Some(DropoutMask {
            dims: input.dims(),
            scale,
        }),
    ))
}

pub fn dropout_backward<T: Scalar>(
    mask: Option<&DropoutMask<T>>,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let Some(mask) = mask else {
        return Ok(grad_out.clone());
    };
    if mask.dims != grad_out.dims() {
        return Err(Error::shape(
            "dropout_backward",
            format!("mask {:?}", mask.dims),
            format!("grad_out {:?}", grad_out.dims()),
        ));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(&mask.scale)
        .map(|(&g, &s)| g * s)
        .collect();
    Tensor4::new(grad_out.dims(), data)
}
