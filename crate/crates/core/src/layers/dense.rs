use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm, he_init, Matrix, Tensor4};

/// Fully connected layer `y = Wᵀx + b` over flattened batch items.
/// `weights` is `inputs × outputs`; the output is `N × outputs × 1 × 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct DenseGrads<T> {
    pub input: Option<Tensor4<T>>,
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(weights: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(Error::shape(
                "DenseLayer bias",
                format!("length {}", bias.len()),
                format!("{} outputs", weights.cols()),
            ));
        }
        Ok(Self { weights, bias })
    }

    pub fn he(inputs: usize, outputs: usize, seed: u64) -> Result<Self> {
        Self::new(
            he_init(inputs, outputs, inputs, seed)?,
            vec![T::zero(); outputs],
        )
    }

    pub fn inputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.cols()
    }

    fn check_input(&self, input: &Tensor4<T>) -> Result<()> {
        if input.item_len() != self.inputs() {
            return Err(Error::shape(
                "dense input length",
                format!("input items have {}", input.item_len()),
                format!("layer expects {}", self.inputs()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(input)?;
        let (n, k, m) = (input.batch(), self.inputs(), self.outputs());
        let mut out = vec![T::zero(); n * m];
        gemm(n, k, m, input.data(), self.weights.data(), &mut out);
        for row in out.chunks_mut(m) {
            row.iter_mut().zip(&self.bias).for_each(|(v, &b)| *v += b);
        }
        Tensor4::new([n, m, 1, 1], out)
    }

    pub fn backward(
        &self,
        input: &Tensor4<T>,
        grad_out: &Tensor4<T>,
        need_input_grad: bool,
    ) -> Result<DenseGrads<T>> {
        self.check_input(input)?;
        let (n, k, m) = (input.batch(), self.inputs(), self.outputs());
        if grad_out.dims() != [n, m, 1, 1] {
            return Err(Error::shape(
                "dense grad_out",
                format!("{:?}", grad_out.dims()),
                format!("{:?}", [n, m, 1, 1]),
            ));
        }
        let mut bias = vec![T::zero(); m];
        for row in grad_out.data().chunks(m) {
            bias.iter_mut().zip(row).for_each(|(b, &g)| *b += g);
        }
        let x_t = Matrix::new(n, k, input.data().to_vec())?.transpose();
        let mut gw = vec![T::zero(); k * m];
        gemm(k, n, m, x_t.data(), grad_out.data(), &mut gw);
        let grad_input = if need_input_grad {
            let w_t = self.weights.transpose();
            let mut gi = vec![T::zero(); n * k];
            gemm(n, m, k, grad_out.data(), w_t.data(), &mut gi);
            Some(Tensor4::new(input.dims(), gi)?)
        } else {
            None
        };
        Ok(DenseGrads {
            input: grad_input,
            weights: Matrix::new(k, m, gw)?,
            bias,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_passthrough() {
        let layer = DenseLayer::new(Matrix::<f64>::identity(4), vec![0.0; 4]).unwrap();
        let x = Tensor4::new([2, 1, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.dims(), [2, 4, 1, 1]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn classifier_head_shape() {
        let layer = DenseLayer::<f32>::he(512, 10, 0).unwrap();
        let y = layer
            .forward(&Tensor4::zeros([3, 512, 1, 1]).unwrap())
            .unwrap();
        assert_eq!(y.dims(), [3, 10, 1, 1]);
        assert!(layer
            .forward(&Tensor4::zeros([3, 511, 1, 1]).unwrap())
            .is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Matrix::new(6, 3, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut layer = DenseLayer::new(w, vec![0.1, -0.2, 0.3]).unwrap();
        let x = Tensor4::from_fn([4, 6, 1, 1], |_| rng.random_range(-1.0..1.0)).unwrap();
        let r = Tensor4::from_fn([4, 3, 1, 1], |_| rng.random_range(-1.0..1.0)).unwrap();
        let g = layer.backward(&x, &r, true).unwrap();
        let probe = layer.clone();

        let mut xv = x.data().to_vec();
        let fd_x = central_difference(&mut xv, 1e-5, |v| {
            probe
                .forward(&Tensor4::new(x.dims(), v.to_vec()).unwrap())
                .unwrap()
                .dot(&r)
                .unwrap()
        });
        assert!(relative_error(g.input.unwrap().data(), &fd_x) < 1e-6);

        let mut wv = layer.weights.data().to_vec();
        let fd_w = central_difference(&mut wv, 1e-5, |v| {
            let l = DenseLayer::new(Matrix::new(6, 3, v.to_vec()).unwrap(), probe.bias.clone())
                .unwrap();
            l.forward(&x).unwrap().dot(&r).unwrap()
        });
        assert!(relative_error(g.weights.data(), &fd_w) < 1e-6);

        let mut bv = layer.bias.clone();
        let fd_b = central_difference(&mut bv, 1e-5, |v| {
            layer.bias = v.to_vec();
            layer.forward(&x).unwrap().dot(&r).unwrap()
        });
        assert!(relative_error(&g.bias, &fd_b) < 1e-6);
    }
}
