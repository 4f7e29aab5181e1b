//! Orthogonal projection layers and the pairwise-cosine orthogonality penalty.
//!
//! A projection layer is a bias-free linear convolution whose filter bank is
//! held as a matrix `U` with one flattened filter per row (`C_p × S·S·C_i`).
//! Training adds `β·∂P/∂U` to the data gradient of `U`, where
//!
//! ```text
//! P(U) = Σ_{i<j} |u_i·u_j| / (|u_i|·|u_j|)
//! ```
//!
//! is the sum of absolute cosines between distinct rows. Its gradient is
//! evaluated in the matrix form `(D − B)·U` with
//!
//! ```text
//! d_ij = sign(u_i·u_j) / (|u_i|·|u_j|)
//! b_ii = Σ_j g_ij / (u_i·u_i),   g_ij = |u_i·u_j| / (|u_i|·|u_j|)
//! ```
//!
//! The sums run over all `j` including `j = i`; the self terms of `D` and
//! `B` cancel exactly, which makes a row-orthogonal `U` a stationary point.

use crate::error::{Error, Result};
use crate::layers::{filter_backward, filter_forward};
use crate::scalar::Scalar;
use crate::tensor::{gemm, he_init, Matrix, Tensor4};

/// Rows with a smaller Euclidean norm are rejected by the penalty routines.
pub const ROW_NORM_FLOOR: f64 = 1e-12;

/// Gram matrix `U·Uᵀ` and row norms, validating the norm floor.
fn gram<T: Scalar>(u: &Matrix<T>) -> Result<(Vec<T>, Vec<T>)> {
    let (m, d) = u.shape();
    let ut = u.transpose();
    let mut g = vec![T::zero(); m * m];
    gemm(m, d, m, u.data(), ut.data(), &mut g);
    let mut norms = Vec::with_capacity(m);
    for i in 0..m {
        let n = g[i * m + i].sqrt();
        if !(n.as_f64() >= ROW_NORM_FLOOR) {
            return Err(Error::ZeroNormRow { row: i });
        }
        norms.push(n);
    }
    Ok((g, norms))
}

#[inline]
fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Sum of absolute cosine similarities over distinct row pairs.
pub fn penalty_value<T: Scalar>(u: &Matrix<T>) -> Result<T> {
    let (g, norms) = gram(u)?;
    let m = u.rows();
    let mut total = T::zero();
    for i in 0..m {
        for j in i + 1..m {
            total += g[i * m + j].abs() / (norms[i] * norms[j]);
        }
    }
    Ok(total)
}

/// `∂P/∂U = (D − B)·U`, same shape as `U`.
pub fn penalty_gradient<T: Scalar>(u: &Matrix<T>) -> Result<Matrix<T>> {
    let (g, norms) = gram(u)?;
    let (m, d) = u.shape();
    let mut dmb = vec![T::zero(); m * m];
    for i in 0..m {
        let mut g_sum = T::zero();
        for j in 0..m {
            let denom = norms[i] * norms[j];
            let dot = g[i * m + j];
            dmb[i * m + j] = sign(dot) / denom;
            g_sum += dot.abs() / denom;
        }
        dmb[i * m + i] -= g_sum / g[i * m + i];
    }
    let mut out = Matrix::zeros(m, d);
    gemm(m, m, d, &dmb, u.data(), out.data_mut());
    Ok(out)
}

/// Data gradient plus the weighted penalty gradient.
pub fn penalized_gradient<T: Scalar>(
    delta_u: &Matrix<T>,
    u: &Matrix<T>,
    beta: T,
) -> Result<Matrix<T>> {
    if !delta_u.same_shape(u) {
        return Err(Error::shape(
            "penalized_gradient",
            format!("delta_U {:?}", delta_u.shape()),
            format!("U {:?}", u.shape()),
        ));
    }
    if beta < T::zero() {
        return Err(Error::InvalidArgument(format!(
            "beta must be >= 0, got {beta}"
        )));
    }
    let mut out = delta_u.clone();
    if beta != T::zero() {
        let pg = penalty_gradient(u)?;
        for (o, &p) in out.data_mut().iter_mut().zip(pg.data()) {
            *o += beta * p;
        }
    }
    Ok(out)
}

/// Plain gradient step `U − γ·grad`.
pub fn update_u<T: Scalar>(u: &Matrix<T>, grad: &Matrix<T>, gamma: T) -> Result<Matrix<T>> {
    if !grad.same_shape(u) {
        return Err(Error::shape(
            "update_U",
            format!("U {:?}", u.shape()),
            format!("grad {:?}", grad.shape()),
        ));
    }
    if !(gamma > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be > 0, got {gamma}"
        )));
    }
    let data = u
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&w, &g)| w - gamma * g)
        .collect();
    Matrix::new(u.rows(), u.cols(), data)
}

/// Largest absolute cosine between two distinct rows (0 for a single row).
pub fn ortho_measure<T: Scalar>(u: &Matrix<T>) -> Result<T> {
    let (g, norms) = gram(u)?;
    let m = u.rows();
    let mut worst = T::zero();
    for i in 0..m {
        for j in i + 1..m {
            worst = worst.max(g[i * m + j].abs() / (norms[i] * norms[j]));
        }
    }
    Ok(worst)
}

/// Smallest and largest row norm.
pub fn row_norm_range<T: Scalar>(u: &Matrix<T>) -> (T, T) {
    (0..u.rows())
        .map(|i| u.row(i).iter().map(|&v| v * v).sum::<T>().sqrt())
        .fold((T::infinity(), T::zero()), |(lo, hi), n| {
            (lo.min(n), hi.max(n))
        })
}

/// Filter bank and geometry of a linear projection layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights<T> {
    /// `C_p × (S·S·C_i)`, one flattened filter per row (channel, kernel row, kernel column).
    pub u: Matrix<T>,
    pub kernel: usize,
    pub in_channels: usize,
    pub stride: usize,
    pub pad: usize,
    /// Whether the orthogonality penalty is applied during training.
    pub constrained: bool,
}

impl<T: Scalar> ProjectionWeights<T> {
    pub fn new(
        u: Matrix<T>,
        kernel: usize,
        in_channels: usize,
        stride: usize,
        pad: usize,
        constrained: bool,
    ) -> Result<Self> {
        let patch = kernel * kernel * in_channels;
        if kernel == 0 || stride == 0 || in_channels == 0 {
            return Err(Error::InvalidArgument(
                "projection kernel, stride and channels must be >= 1".into(),
            ));
        }
        if u.cols() != patch {
            return Err(Error::shape(
                "projection matrix columns",
                format!("U has {} columns", u.cols()),
                format!("S·S·C_i = {patch}"),
            ));
        }
        if u.rows() >= patch {
            return Err(Error::shape(
                "projection must reduce dimension",
                format!("C_p = {}", u.rows()),
                format!("S·S·C_i = {patch}"),
            ));
        }
        Ok(Self {
            u,
            kernel,
            in_channels,
            stride,
            pad,
            constrained,
        })
    }

    /// He-initialized projection (fan-in S·S·C_i).
    pub fn he(
        in_channels: usize,
        maps: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        constrained: bool,
        seed: u64,
    ) -> Result<Self> {
        let patch = kernel * kernel * in_channels;
        Self::new(
            he_init(maps, patch, patch, seed)?,
            kernel,
            in_channels,
            stride,
            pad,
            constrained,
        )
    }

    pub fn out_channels(&self) -> usize {
        self.u.rows()
    }

    fn check_input(&self, input: &Tensor4<T>) -> Result<()> {
        if input.channels() != self.in_channels {
            return Err(Error::shape(
                "projection input channels",
                format!("input has {}", input.channels()),
                format!("layer expects {}", self.in_channels),
            ));
        }
        Ok(())
    }

    /// `z = U·x` applied at every receptive field.
    pub fn forward(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(input)?;
        filter_forward(&self.u, None, input, self.kernel, self.stride, self.pad)
    }

    /// Returns `(grad_input, ΔU)`; `grad_input` is `None` unless requested.
    pub fn backward(
        &self,
        input: &Tensor4<T>,
        grad_out: &Tensor4<T>,
        need_input_grad: bool,
    ) -> Result<(Option<Tensor4<T>>, Matrix<T>)> {
        self.check_input(input)?;
        let (gi, gu, _) = filter_backward(
            &self.u,
            input,
            grad_out,
            self.kernel,
            self.stride,
            self.pad,
            need_input_grad,
        )?;
        Ok((gi, gu))
    }
}
