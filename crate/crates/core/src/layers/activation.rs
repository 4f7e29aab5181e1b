use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

pub fn relu<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `grad_out` where `input > 0`; the subgradient at exactly zero is 0.
pub fn relu_backward<T: Scalar>(input: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    if input.dims() != grad_out.dims() {
        return Err(Error::shape(
            "relu_backward",
            format!("input {:?}", input.dims()),
            format!("grad_out {:?}", grad_out.dims()),
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor4::new(input.dims(), data)
}
