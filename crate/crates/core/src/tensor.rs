//! Dense NCHW tensors, row-major matrices, and the im2col/col2im layout
//! transforms that turn convolution into matrix multiplication.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Four-dimensional array in batch × channel × height × width layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    data: Vec<T>,
    dims: [usize; 4],
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        check_dims(dims)?;
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::shape(
                "Tensor4::new",
                format!("buffer length {}", data.len()),
                format!("dims {:?} ({len} elements)", dims),
            ));
        }
        Ok(Self { data, dims })
    }

    pub fn zeros(dims: [usize; 4]) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            data: vec![T::zero(); dims.iter().product()],
            dims,
        })
    }

    pub fn filled(dims: [usize; 4], value: T) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            data: vec![value; dims.iter().product()],
            dims,
        })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Result<Self> {
        check_dims(dims)?;
        let mut data = Vec::with_capacity(dims.iter().product());
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        data.push(f([n, c, y, x]));
                    }
                }
            }
        }
        Ok(Self { data, dims })
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.dims[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.dims[3]
    }

    /// Elements per batch item (C·H·W).
    #[inline]
    pub fn item_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.offset(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous slice of batch item `n`.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Same buffer viewed under new dims with equal element count.
    pub fn reshape(self, dims: [usize; 4]) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            dims: self.dims,
        }
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.dims != other.dims {
            return Err(Error::shape(
                "Tensor4::dot",
                format!("{:?}", self.dims),
                format!("{:?}", other.dims),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            dims: self.dims,
        }
    }
}

fn check_dims(dims: [usize; 4]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "tensor dims must all be >= 1, got {:?}",
            dims
        )));
    }
    Ok(())
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    data: Vec<T>,
    rows: usize,
    cols: usize,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("buffer length {}", data.len()),
                format!("{rows}x{cols}"),
            ));
        }
        Ok(Self { data, rows, cols })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            data: vec![T::zero(); rows * cols],
            rows,
            cols,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Builds a matrix from `f64` rows; panics on ragged input (test helper).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows
            .iter()
            .flat_map(|r| r.iter().map(|&v| T::of(v)))
            .collect();
        Self {
            data,
            rows: rows.len(),
            cols,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        transpose_into(self.rows, self.cols, &self.data, &mut out.data);
        out
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if !self.same_shape(other) {
            return Err(Error::shape(
                "Matrix::max_abs_diff",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }
}

pub(crate) fn transpose_into<T: Copy>(rows: usize, cols: usize, src: &[T], dst: &mut [T]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Matrix product `a × b`.
///
/// Each output element is accumulated from zero over the inner index in
/// increasing order, so the result is bitwise identical to the textbook
/// triple loop.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul inner dimension",
            format!("a.cols = {}", a.cols),
            format!("b.rows = {}", b.rows),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm(a.rows, a.cols, b.cols, &a.data, &b.data, &mut out.data);
    Ok(out)
}

const MR: usize = 4;
const NR: usize = 32;

/// `c = a × b` for row-major `a: m×k`, `b: k×n`, `c: m×n`; `c` is overwritten.
pub(crate) fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let mut j0 = 0;
    while j0 < n {
        let w = NR.min(n - j0);
        let mut i0 = 0;
        if w == NR {
            while i0 + MR <= m {
                gemm_block_full(i0, j0, k, n, a, b, c);
                i0 += MR;
            }
        }
        for i in i0..m {
            gemm_row_partial(i, j0, w, k, n, a, b, c);
        }
        j0 += NR;
    }
}

#[inline(always)]
fn gemm_block_full<T: Scalar>(
    i0: usize,
    j0: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
) {
    let mut acc = [[T::zero(); NR]; MR];
    let a_rows: [&[T]; MR] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
    for p in 0..k {
        let brow: &[T; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
        for r in 0..MR {
            let av = a_rows[r][p];
            let acc_r = &mut acc[r];
            for j in 0..NR {
                acc_r[j] += av * brow[j];
            }
        }
    }
    for r in 0..MR {
        c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(&acc[r]);
    }
}

#[inline(always)]
fn gemm_row_partial<T: Scalar>(
    i: usize,
    j0: usize,
    w: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
) {
    let mut acc = [T::zero(); NR];
    let a_row = &a[i * k..(i + 1) * k];
    for (p, &av) in a_row.iter().enumerate() {
        let brow = &b[p * n + j0..p * n + j0 + w];
        for (acc_j, &bv) in acc.iter_mut().zip(brow) {
            *acc_j += av * bv;
        }
    }
    c[i * n + j0..i * n + j0 + w].copy_from_slice(&acc[..w]);
}

/// Geometry of a patch extraction over an NCHW tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    /// Dims of the (unpadded) image tensor.
    pub dims: [usize; 4],
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PatchGeometry {
    pub fn new(
        dims: [usize; 4],
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let g = Self {
            dims,
            kernel_h,
            kernel_w,
            stride,
            pad,
        };
        g.output_hw()?;
        Ok(g)
    }

    /// Output spatial dims; errors unless the stride arithmetic is exact and positive.
    pub fn output_hw(&self) -> Result<(usize, usize)> {
        check_dims(self.dims)?;
        if self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel {}x{} stride {} must all be >= 1",
                self.kernel_h, self.kernel_w, self.stride
            )));
        }
        let ho =
            out_extent(self.dims[2], self.kernel_h, self.stride, self.pad).ok_or_else(|| {
                Error::shape(
                    "patch geometry (height)",
                    format!("padded height {}", self.dims[2] + 2 * self.pad),
                    format!("kernel {} stride {}", self.kernel_h, self.stride),
                )
            })?;
        let wo =
            out_extent(self.dims[3], self.kernel_w, self.stride, self.pad).ok_or_else(|| {
                Error::shape(
                    "patch geometry (width)",
                    format!("padded width {}", self.dims[3] + 2 * self.pad),
                    format!("kernel {} stride {}", self.kernel_w, self.stride),
                )
            })?;
        Ok((ho, wo))
    }

    /// Rows of the im2col matrix: kh·kw·C.
    pub fn patch_len(&self) -> usize {
        self.kernel_h * self.kernel_w * self.dims[1]
    }
}

fn out_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < kernel || !(padded - kernel).is_multiple_of(stride) {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Writes the patches of batch item `n` into `out`, a block of `patch_len`
/// rows with row stride `ld`, starting at column `col0`.
pub(crate) fn im2col_item<T: Scalar>(
    input: &[T],
    g: &PatchGeometry,
    ho: usize,
    wo: usize,
    out: &mut [T],
    ld: usize,
    col0: usize,
) {
    let [_, c_in, h, w] = g.dims;
    let (kh, kw, s, pad) = (g.kernel_h, g.kernel_w, g.stride, g.pad as isize);
    for c in 0..c_in {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut out[row * ld + col0..row * ld + col0 + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - pad;
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - pad;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a `patch_len × (ho·wo)` block (row stride `ld`, starting at
/// column `col0`) into image item buffer `out`.
pub(crate) fn col2im_item<T: Scalar>(
    cols: &[T],
    g: &PatchGeometry,
    ho: usize,
    wo: usize,
    ld: usize,
    col0: usize,
    out: &mut [T],
) {
    let [_, c_in, h, w] = g.dims;
    let (kh, kw, s, pad) = (g.kernel_h, g.kernel_w, g.stride, g.pad as isize);
    for c in 0..c_in {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &cols[row * ld + col0..row * ld + col0 + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds receptive fields into columns.
///
/// Returns a `(kh·kw·C) × (N·H_out·W_out)` matrix. Row order within a patch is
/// channel, then kernel row, then kernel column; column order is batch, then
/// output row, then output column. Out-of-bounds taps read zero.
pub fn im2col<T: Scalar>(
    input: &Tensor4<T>,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    pad: usize,
) -> Result<Matrix<T>> {
    let g = PatchGeometry::new(input.dims(), kernel_h, kernel_w, stride, pad)?;
    let (ho, wo) = g.output_hw()?;
    let n = input.batch();
    let ld = n * ho * wo;
    let mut out = Matrix::zeros(g.patch_len(), ld);
    for b in 0..n {
        im2col_item(input.item(b), &g, ho, wo, &mut out.data, ld, b * ho * wo);
    }
    Ok(out)
}

/// Adjoint of [`im2col`]: scatter-adds every patch entry back to its source
/// pixel. Padding taps are dropped.
pub fn col2im<T: Scalar>(cols: &Matrix<T>, geometry: &PatchGeometry) -> Result<Tensor4<T>> {
    let (ho, wo) = geometry.output_hw()?;
    let n = geometry.dims[0];
    let expected = (geometry.patch_len(), n * ho * wo);
    if cols.shape() != expected {
        return Err(Error::shape(
            "col2im",
            format!("cols {}x{}", cols.rows, cols.cols),
            format!("geometry requires {}x{}", expected.0, expected.1),
        ));
    }
    let mut out = Tensor4::zeros(geometry.dims)?;
    let ld = n * ho * wo;
    for b in 0..n {
        col2im_item(
            &cols.data,
            geometry,
            ho,
            wo,
            ld,
            b * ho * wo,
            out.item_mut(b),
        );
    }
    Ok(out)
}

/// He-normal initialization: i.i.d. N(0, 2/fan_in) entries from a seeded
/// ChaCha8 stream, filled row-major.
pub fn he_init<T: Scalar>(rows: usize, cols: usize, fan_in: usize, seed: u64) -> Result<Matrix<T>> {
    if fan_in == 0 {
        return Err(Error::InvalidArgument(
            "he_init: fan_in must be >= 1".into(),
        ));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| T::of(normal.sample(&mut rng)))
        .collect();
    Matrix::new(rows, cols, data)
}
