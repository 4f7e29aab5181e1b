use crate::error::{Error, Result};
use crate::runtime::{for_each_chunk, for_each_chunk_reduce};
use crate::scalar::Scalar;
use crate::tensor::{
    col2im_item, gemm, he_init, im2col_item, transpose_into, Matrix, PatchGeometry, Tensor4,
};

/// Convolution with a filter bank stored as `(kh·kw·C_in) × C_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor4<T>>,
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(
        weights: Matrix<T>,
        bias: Vec<T>,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::InvalidArgument(
                "conv kernel and stride must be >= 1".into(),
            ));
        }
        if !weights.rows().is_multiple_of(kernel * kernel) {
            return Err(Error::shape(
                "ConvLayer weights",
                format!("{} rows", weights.rows()),
                format!("a multiple of kernel area {}", kernel * kernel),
            ));
        }
        if bias.len() != weights.cols() {
            return Err(Error::shape(
                "ConvLayer bias",
                format!("length {}", bias.len()),
                format!("{} output maps", weights.cols()),
            ));
        }
        Ok(Self {
            weights,
            bias,
            kernel,
            stride,
            pad,
        })
    }

    /// He-initialized weights, zero bias.
    pub fn he(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        seed: u64,
    ) -> Result<Self> {
        let fan_in = kernel * kernel * in_channels;
        let weights = he_init(fan_in, out_channels, fan_in, seed)?;
        Self::new(weights, vec![T::zero(); out_channels], kernel, stride, pad)
    }

    pub fn in_channels(&self) -> usize {
        self.weights.rows() / (self.kernel * self.kernel)
    }

    pub fn out_channels(&self) -> usize {
        self.weights.cols()
    }

    pub fn forward(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(input)?;
        let filters = self.weights.transpose();
        filter_forward(
            &filters,
            Some(&self.bias),
            input,
            self.kernel,
            self.stride,
            self.pad,
        )
    }

    /// Gradients of a forward pass on `input` given `grad_out`.
    pub fn backward(
        &self,
        input: &Tensor4<T>,
        grad_out: &Tensor4<T>,
        need_input_grad: bool,
    ) -> Result<ConvGrads<T>> {
        self.check_input(input)?;
        let filters = self.weights.transpose();
        let (gi, gf, gb) = filter_backward(
            &filters,
            input,
            grad_out,
            self.kernel,
            self.stride,
            self.pad,
            need_input_grad,
        )?;
        Ok(ConvGrads {
            input: gi,
            weights: gf.transpose(),
            bias: gb,
        })
    }

    fn check_input(&self, input: &Tensor4<T>) -> Result<()> {
        if input.channels() != self.in_channels() {
            return Err(Error::shape(
                "conv input channels",
                format!("input has {}", input.channels()),
                format!("layer expects {}", self.in_channels()),
            ));
        }
        Ok(())
    }
}

fn geometry_for<T: Scalar>(
    filters: &Matrix<T>,
    input: &Tensor4<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<PatchGeometry> {
    let g = PatchGeometry::new(input.dims(), kernel, kernel, stride, pad)?;
    if filters.cols() != g.patch_len() {
        return Err(Error::shape(
            "filter bank patch length",
            format!("filters have {} taps", filters.cols()),
            format!("input patches have {}", g.patch_len()),
        ));
    }
    Ok(g)
}

/// Convolution with filters laid out one per row (`C_out × (kh·kw·C_in)`).
pub(crate) fn filter_forward<T: Scalar>(
    filters: &Matrix<T>,
    bias: Option<&[T]>,
    input: &Tensor4<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor4<T>> {
    let g = geometry_for(filters, input, kernel, stride, pad)?;
    let (ho, wo) = g.output_hw()?;
    let (c_out, k) = filters.shape();
    let hw = ho * wo;
    let mut out = Tensor4::zeros([input.batch(), c_out, ho, wo])?;
    for_each_chunk(
        out.data_mut(),
        c_out * hw,
        || vec![T::zero(); k * hw],
        |cols, b, out_item| {
            im2col_item(input.item(b), &g, ho, wo, cols, hw, 0);
            gemm(c_out, k, hw, filters.data(), cols, out_item);
            if let Some(bias) = bias {
                for (plane, &bv) in out_item.chunks_mut(hw).zip(bias) {
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        },
    );
    Ok(out)
}

/// Backward pass for [`filter_forward`]; returns (grad_input, grad_filters, grad_bias).
pub(crate) fn filter_backward<T: Scalar>(
    filters: &Matrix<T>,
    input: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
    need_input_grad: bool,
) -> Result<(Option<Tensor4<T>>, Matrix<T>, Vec<T>)> {
    let g = geometry_for(filters, input, kernel, stride, pad)?;
    let (ho, wo) = g.output_hw()?;
    let (c_out, k) = filters.shape();
    let expected = [input.batch(), c_out, ho, wo];
    if grad_out.dims() != expected {
        return Err(Error::shape(
            "conv grad_out",
            format!("{:?}", grad_out.dims()),
            format!("forward output {:?}", expected),
        ));
    }
    let hw = ho * wo;

    let mut grad_bias = vec![T::zero(); c_out];
    for b in 0..input.batch() {
        for (gb, plane) in grad_bias.iter_mut().zip(grad_out.item(b).chunks(hw)) {
            *gb += plane.iter().copied().fold(T::zero(), |a, v| a + v);
        }
    }

    let filters_t = filters.transpose();
    let mut grad_filters = vec![T::zero(); c_out * k];
    // when the input gradient is not needed, chunks are 1-element placeholders
    let (mut grad_input, item_len) = if need_input_grad {
        (Tensor4::zeros(input.dims())?.into_data(), input.item_len())
    } else {
        (vec![T::zero(); input.batch()], 1)
    };
    for_each_chunk_reduce(
        &mut grad_input,
        item_len,
        &mut grad_filters,
        || (vec![T::zero(); k * hw], vec![T::zero(); hw * k]),
        |(cols, cols_t), b, gi_item, partial| {
            let go = grad_out.item(b);
            im2col_item(input.item(b), &g, ho, wo, cols, hw, 0);
            transpose_into(k, hw, cols, cols_t);
            partial.resize(c_out * k, T::zero());
            gemm(c_out, hw, k, go, cols_t, partial);
            if need_input_grad {
                gemm(k, c_out, hw, filters_t.data(), go, cols);
                col2im_item(cols, &g, ho, wo, hw, 0, gi_item);
            }
        },
    );
    let grad_input = if need_input_grad {
        Some(Tensor4::new(input.dims(), grad_input)?)
    } else {
        None
    };
    Ok((grad_input, Matrix::new(c_out, k, grad_filters)?, grad_bias))
}
