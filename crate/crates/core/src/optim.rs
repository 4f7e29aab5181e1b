//! SGD with momentum, weight decay and the step schedules for the learning
//! rate and the orthogonality penalty weight.

use crate::error::{Error, Result};
use crate::hope::penalized_gradient;
use crate::model::{Network, ParamKind, ParamMut};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparameters {
    pub lr0: f64,
    pub lr_divisor: f64,
    pub lr_period: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta0: f64,
    pub beta_divisor: f64,
    pub beta_period: usize,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            lr0: 0.06,
            lr_divisor: 2.0,
            lr_period: 25,
            momentum: 0.9,
            weight_decay: 0.0005,
            beta0: 0.15,
            beta_divisor: 1.75,
            beta_period: 25,
            epochs: 400,
            batch: 100,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr0", self.lr0),
            ("lr_divisor", self.lr_divisor),
            ("beta0", self.beta0),
            ("beta_divisor", self.beta_divisor),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "{name} must be positive and finite, got {v}"
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need momentum in [0, 1) and weight_decay >= 0, got {} and {}",
                self.momentum, self.weight_decay
            )));
        }
        if self.lr_period == 0 || self.beta_period == 0 || self.epochs == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument(
                "periods, epochs and batch must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// `lr0 / lr_divisor^floor(epoch / lr_period)`.
pub fn lr_at_epoch(hyper: &Hyperparameters, epoch: usize) -> f64 {
    hyper.lr0 / hyper.lr_divisor.powi((epoch / hyper.lr_period) as i32)
}

/// `beta0 / beta_divisor^floor(epoch / beta_period)`.
pub fn beta_at_epoch(hyper: &Hyperparameters, epoch: usize) -> f64 {
    hyper.beta0 / hyper.beta_divisor.powi((epoch / hyper.beta_period) as i32)
}

/// Optimizer state: momenta, epoch counter and the current schedule values.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    /// One buffer per parameter, in [`Network::params`] order.
    pub momenta: Vec<Vec<T>>,
    pub epoch: usize,
    pub gamma: f64,
    pub beta: f64,
    pub hyper: Hyperparameters,
    pub seed: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(net: &Network<T>, hyper: Hyperparameters, seed: u64) -> Result<Self> {
        hyper.validate()?;
        Ok(Self {
            momenta: net
                .params()
                .iter()
                .map(|p| vec![T::zero(); p.value.len()])
                .collect(),
            epoch: 0,
            gamma: lr_at_epoch(&hyper, 0),
            beta: beta_at_epoch(&hyper, 0),
            hyper,
            seed,
        })
    }

    /// Moves to `epoch` and refreshes γ and β from the schedules.
    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
        self.gamma = lr_at_epoch(&self.hyper, epoch);
        self.beta = beta_at_epoch(&self.hyper, epoch);
    }

    /// Applies one update to `net` with gradients from [`Network::backward`].
    pub fn step(&mut self, net: &mut Network<T>, grads: &[Matrix<T>]) -> Result<()> {
        sgd_step(&mut net.params_mut(), grads, self)
    }
}

/// `v ← μ·v + g + λ·p`, `p ← p − γ·v`. Decay is skipped for biases and
/// batch-norm affine parameters; constrained projections first add the
/// β-weighted orthogonality penalty gradient to `g`.
pub fn sgd_step<T: Scalar>(
    params: &mut [ParamMut<'_, T>],
    grads: &[Matrix<T>],
    state: &mut TrainState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.momenta.len() {
        return Err(Error::shape(
            "sgd_step parameter count",
            format!("{} params, {} grads", params.len(), grads.len()),
            format!("{} momenta", state.momenta.len()),
        ));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.momenta) {
        if g.shape() != (p.rows, p.cols) || v.len() != p.value.len() {
            return Err(Error::shape(
                "sgd_step",
                format!("{} is {}x{}", p.name, p.rows, p.cols),
                format!("grad {:?}, momentum {}", g.shape(), v.len()),
            ));
        }
    }
    if !(state.gamma > 0.0) || state.beta < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "need gamma > 0 and beta >= 0, got {} and {}",
            state.gamma, state.beta
        )));
    }
    let mu = T::of(state.hyper.momentum);
    let gamma = T::of(state.gamma);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.momenta.iter_mut()) {
        let penalized;
        let g = match p.kind {
            ParamKind::Projection { constrained: true } => {
                let u = Matrix::new(p.rows, p.cols, p.value.to_vec())?;
                penalized = penalized_gradient(g, &u, T::of(state.beta))?;
                &penalized
            }
            _ => g,
        };
        let decay = if p.kind.decays() {
            T::of(state.hyper.weight_decay)
        } else {
            T::zero()
        };
        for ((w, &gi), vi) in p.value.iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vi = mu * *vi + gi + decay * *w;
            *w -= gamma * *vi;
        }
    }
    Ok(())
}
