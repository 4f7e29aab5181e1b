use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{PatchGeometry, Tensor4};

/// Winner positions recorded by [`maxpool_forward`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_dims: [usize; 4],
    pub output_dims: [usize; 4],
    /// Flat input offset of the max for every output cell.
    pub argmax: Vec<usize>,
}

/// `k×k` max pooling. Ties go to the first element in row-major window order.
pub fn maxpool_forward<T: Scalar>(
    input: &Tensor4<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor4<T>, PoolIndices)> {
    let g = PatchGeometry::new(input.dims(), k, k, stride, 0)?;
    let (ho, wo) = g.output_hw()?;
    let [n, c, h, w] = input.dims();
    let out_dims = [n, c, ho, wo];
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    let data = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor4::new(out_dims, out)?,
        PoolIndices {
            input_dims: input.dims(),
            output_dims: out_dims,
            argmax,
        },
    ))
}

pub fn maxpool_backward<T: Scalar>(
    indices: &PoolIndices,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    if grad_out.dims() != indices.output_dims || indices.argmax.len() != grad_out.len() {
        return Err(Error::shape(
            "maxpool_backward (stale indices)",
            format!("grad_out {:?}", grad_out.dims()),
            format!("indices for output {:?}", indices.output_dims),
        ));
    }
    let mut grad = Tensor4::zeros(indices.input_dims)?;
    let gd = grad.data_mut();
    for (&idx, &g) in indices.argmax.iter().zip(grad_out.data()) {
        gd[idx] += g;
    }
    Ok(grad)
}
