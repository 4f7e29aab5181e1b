use super::Mode;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

pub const BN_EPSILON: f64 = 0.001;
/// Weight of the current batch in the running-statistics moving average.
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over (N, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer<T> {
    pub gamma: Vec<T>,
    pub shift: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor4<T>,
    pub inv_std: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T> {
    pub input: Tensor4<T>,
    pub gamma: Vec<T>,
    pub shift: Vec<T>,
}

impl<T: Scalar> BatchNormLayer<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            shift: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes `input`. Train mode uses batch statistics, updates the
    /// running averages and returns the cache needed by [`Self::backward`].
    pub fn forward(
        &mut self,
        input: &Tensor4<T>,
        mode: Mode,
    ) -> Result<(Tensor4<T>, Option<BatchNormCache<T>>)> {
        let [n, c, h, w] = input.dims();
        if c != self.channels() {
            return Err(Error::shape(
                "batchnorm channels",
                format!("input has {c}"),
                format!("layer has {}", self.channels()),
            ));
        }
        let hw = h * w;
        match mode {
            Mode::Eval => Ok((self.infer(input)?, None)),
            Mode::Train => {
                if n < 2 {
                    return Err(Error::InvalidArgument(
                        "batch normalization in train mode needs a batch of at least 2".into(),
                    ));
                }
                let m = (n * hw) as f64;
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for b in 0..n {
                    for (ch, plane) in input.item(b).chunks(hw).enumerate() {
                        mean[ch] += plane.iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for b in 0..n {
                    for (ch, plane) in input.item(b).chunks(hw).enumerate() {
                        var[ch] += plane
                            .iter()
                            .map(|v| (v.as_f64() - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);

                let inv_std: Vec<T> = var
                    .iter()
                    .map(|&v| T::of(1.0 / (v + self.epsilon).sqrt()))
                    .collect();
                let mut normalized = input.clone();
                let mut out = input.clone();
                for b in 0..n {
                    let norm_item = normalized.item_mut(b);
                    for (ch, plane) in norm_item.chunks_mut(hw).enumerate() {
                        let mu = T::of(mean[ch]);
                        plane.iter_mut().for_each(|v| *v = (*v - mu) * inv_std[ch]);
                    }
                    let norm_item = normalized.item(b);
                    for (ch, (o, xh)) in out
                        .item_mut(b)
                        .chunks_mut(hw)
                        .zip(norm_item.chunks(hw))
                        .enumerate()
                    {
                        let (g, s) = (self.gamma[ch], self.shift[ch]);
                        o.iter_mut().zip(xh).for_each(|(o, &x)| *o = g * x + s);
                    }
                }

                let keep = 1.0 - self.momentum;
                let unbias = m / (m - 1.0);
                for ch in 0..c {
                    let rm = keep * self.running_mean[ch].as_f64() + self.momentum * mean[ch];
                    let rv =
                        keep * self.running_var[ch].as_f64() + self.momentum * var[ch] * unbias;
                    self.running_mean[ch] = T::of(rm);
                    self.running_var[ch] = T::of(rv.max(0.0));
                }
                Ok((
                    out,
                    Some(BatchNormCache {
                        normalized,
                        inv_std,
                    }),
                ))
            }
        }
    }

    /// Eval-mode normalization with the running statistics.
    pub fn infer(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        let [n, c, h, w] = input.dims();
        if c != self.channels() {
            return Err(Error::shape(
                "batchnorm channels",
                format!("input has {c}"),
                format!("layer has {}", self.channels()),
            ));
        }
        let hw = h * w;
        let mut out = input.clone();
        for b in 0..n {
            for (ch, plane) in out.item_mut(b).chunks_mut(hw).enumerate() {
                let inv = T::one() / (self.running_var[ch] + T::of(self.epsilon)).sqrt();
                let (mean, g, s) = (self.running_mean[ch], self.gamma[ch], self.shift[ch]);
                plane
                    .iter_mut()
                    .for_each(|v| *v = g * ((*v - mean) * inv) + s);
            }
        }
        Ok(out)
    }

    /// Full batch-norm gradient, including the dependence of the batch
    /// mean and variance on the input.
    pub fn backward(
        &self,
        cache: &BatchNormCache<T>,
        grad_out: &Tensor4<T>,
    ) -> Result<BatchNormGrads<T>> {
        let xhat = &cache.normalized;
        if xhat.dims() != grad_out.dims() {
            return Err(Error::shape(
                "batchnorm backward",
                format!("grad_out {:?}", grad_out.dims()),
                format!("cache {:?}", xhat.dims()),
            ));
        }
        let [n, c, h, w] = xhat.dims();
        let hw = h * w;
        let m = T::of((n * hw) as f64);
        let mut grad_shift = vec![T::zero(); c];
        let mut grad_gamma = vec![T::zero(); c];
        for b in 0..n {
            for (ch, (gp, xp)) in grad_out
                .item(b)
                .chunks(hw)
                .zip(xhat.item(b).chunks(hw))
                .enumerate()
            {
                for (&g, &x) in gp.iter().zip(xp) {
                    grad_shift[ch] += g;
                    grad_gamma[ch] += g * x;
                }
            }
        }
        // dx = gamma·inv_std/m · (m·dy − Σdy − x̂·Σ(dy·x̂))
        let mut grad_in = grad_out.clone();
        for b in 0..n {
            let xi = xhat.item(b);
            for (ch, gp) in grad_in.item_mut(b).chunks_mut(hw).enumerate() {
                let scale = self.gamma[ch] * cache.inv_std[ch] / m;
                let xp = &xi[ch * hw..(ch + 1) * hw];
                for (g, &x) in gp.iter_mut().zip(xp) {
                    *g = scale * (m * *g - grad_shift[ch] - x * grad_gamma[ch]);
                }
            }
        }
        Ok(BatchNormGrads {
            input: grad_in,
            gamma: grad_gamma,
            shift: grad_shift,
        })
    }
}
