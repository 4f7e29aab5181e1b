use super::config::{LayerSpec, NetworkConfig};
use crate::error::{Error, Result};
use crate::hope::ProjectionWeights;
use crate::layers::{
    dropout, dropout_backward, maxpool_backward, maxpool_forward, relu, relu_backward,
    softmax_cross_entropy, BatchNormCache, BatchNormLayer, ConvLayer, DenseLayer, DropoutLayer,
    DropoutMask, Mode, PoolIndices,
};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::{Matrix, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(ConvLayer<T>),
    Projection(ProjectionWeights<T>),
    MaxPool { size: usize, stride: usize },
    BatchNorm(BatchNormLayer<T>),
    Relu,
    Dropout(DropoutLayer),
    Dense(DenseLayer<T>),
}

/// How the optimizer treats a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnAffine,
    Projection { constrained: bool },
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Projection { .. })
    }
}

/// A named parameter tensor viewed as a `rows × cols` matrix.
#[derive(Debug)]
pub struct Param<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub rows: usize,
    pub cols: usize,
    pub value: &'a [T],
}

#[derive(Debug)]
pub struct ParamMut<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub rows: usize,
    pub cols: usize,
    pub value: &'a mut [T],
}

/// Per-layer state kept by a training forward pass.
#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    /// Layer input (conv, projection, dense, relu).
    Input(Tensor4<T>),
    Pool(PoolIndices),
    BatchNorm(BatchNormCache<T>),
    Dropout(Option<DropoutMask<T>>),
}

#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    /// Mean cross-entropy over the batch.
    pub loss: T,
    pub logits: Matrix<T>,
    pub predictions: Vec<usize>,
    /// `∂loss/∂logits`.
    pub grad_logits: Matrix<T>,
    /// One entry per layer in train mode, empty in eval mode.
    pub caches: Vec<LayerCache<T>>,
}

/// A feed-forward stack built from a [`NetworkConfig`]. The trailing
/// `softmax_ce` of the config is the loss and has no entry in `layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    config: NetworkConfig,
    layers: Vec<Layer<T>>,
}

fn bias_param<'a, T>(name: String, kind: ParamKind, v: &'a [T]) -> Param<'a, T> {
    Param {
        name,
        kind,
        rows: 1,
        cols: v.len(),
        value: v,
    }
}

fn bias_param_mut<'a, T>(name: String, kind: ParamKind, v: &'a mut [T]) -> ParamMut<'a, T> {
    ParamMut {
        name,
        kind,
        rows: 1,
        cols: v.len(),
        value: v,
    }
}

fn row<T: Scalar>(v: Vec<T>) -> Result<Matrix<T>> {
    Matrix::new(1, v.len(), v)
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Multiplier on the He-initialized weights of the final dense layer.
pub const CLASSIFIER_GAIN: f64 = 0.1;

impl<T: Scalar> Network<T> {
    /// Validates `config` and He-initializes every parameterized layer from
    /// a per-layer seed derived from `seed`. The classifier feeding the loss
    /// is scaled by [`CLASSIFIER_GAIN`] so the initial softmax is near uniform.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let config = config.canonical()?;
        let shapes = config.shapes()?;
        let mut layers = Vec::with_capacity(config.layers.len());
        let mut input = config.input;
        for (index, spec) in config.layers.iter().enumerate() {
            let s = seed::derive(seed, index as u64);
            let c = input[0];
            let layer = match *spec {
                LayerSpec::Conv {
                    kernel,
                    maps,
                    stride,
                    pad,
                    ..
                } => Layer::Conv(ConvLayer::he(c, maps, kernel, stride, pad, s)?),
                LayerSpec::Projection {
                    kernel,
                    maps,
                    stride,
                    pad,
                    constrained,
                    ..
                } => Layer::Projection(ProjectionWeights::he(
                    c,
                    maps,
                    kernel,
                    stride,
                    pad,
                    constrained,
                    s,
                )?),
                LayerSpec::MaxPool { size, stride } => Layer::MaxPool { size, stride },
                LayerSpec::BatchNorm => Layer::BatchNorm(BatchNormLayer::new(c)),
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Dropout { rate } => Layer::Dropout(DropoutLayer::new(rate)?),
                LayerSpec::Dense { units } => {
                    let mut dense = DenseLayer::he(input.iter().product(), units, s)?;
                    if matches!(config.layers.get(index + 1), Some(LayerSpec::SoftmaxCe)) {
                        dense
                            .weights
                            .data_mut()
                            .iter_mut()
                            .for_each(|w| *w *= T::of(CLASSIFIER_GAIN));
                    }
                    Layer::Dense(dense)
                }
                LayerSpec::SoftmaxCe => break,
            };
            layers.push(layer);
            input = shapes[index];
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    /// Projection layers with their layer index.
    pub fn projections(&self) -> impl Iterator<Item = (usize, &ProjectionWeights<T>)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            Layer::Projection(p) => Some((i, p)),
            _ => None,
        })
    }

    fn check_input(&self, input: &Tensor4<T>) -> Result<()> {
        let [_, c, h, w] = input.dims();
        if [c, h, w] != self.config.input || input.batch() == 0 {
            return Err(Error::shape(
                "network input",
                format!("{:?}", input.dims()),
                format!("N x {:?}", self.config.input),
            ));
        }
        Ok(())
    }

    fn scores(&self, out: Tensor4<T>) -> Result<Matrix<T>> {
        let [n, k, ..] = out.dims();
        Matrix::new(n, k, out.into_data())
    }

    /// Eval-mode class scores, `N × classes`.
    pub fn logits(&self, input: &Tensor4<T>) -> Result<Matrix<T>> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(l) => l.forward(&x)?,
                Layer::Projection(p) => p.forward(&x)?,
                Layer::MaxPool { size, stride } => maxpool_forward(&x, *size, *stride)?.0,
                Layer::BatchNorm(bn) => bn.infer(&x)?,
                Layer::Relu => relu(&x),
                Layer::Dropout(_) => x,
                Layer::Dense(d) => d.forward(&x)?,
            };
        }
        self.scores(x)
    }

    /// Eval-mode loss and predicted classes.
    pub fn evaluate(&self, input: &Tensor4<T>, labels: &[usize]) -> Result<(T, Vec<usize>)> {
        let logits = self.logits(input)?;
        let (loss, _) = softmax_cross_entropy(&logits, labels)?;
        Ok((
            loss,
            (0..logits.rows()).map(|r| argmax(logits.row(r))).collect(),
        ))
    }

    /// Forward pass with loss. Train mode updates batch-norm running
    /// statistics, samples dropout masks from `dropout_seed` and records the
    /// caches needed by [`Self::backward`].
    pub fn forward(
        &mut self,
        input: &Tensor4<T>,
        labels: &[usize],
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<ForwardPass<T>> {
        let (logits, caches) = match mode {
            Mode::Eval => (self.logits(input)?, Vec::new()),
            Mode::Train => {
                self.check_input(input)?;
                let mut caches = Vec::with_capacity(self.layers.len());
                let mut x = input.clone();
                for (index, layer) in self.layers.iter_mut().enumerate() {
                    let (y, cache) = match layer {
                        Layer::Conv(l) => (l.forward(&x)?, LayerCache::Input(x)),
                        Layer::Projection(p) => (p.forward(&x)?, LayerCache::Input(x)),
                        Layer::MaxPool { size, stride } => {
                            let (y, idx) = maxpool_forward(&x, *size, *stride)?;
                            (y, LayerCache::Pool(idx))
                        }
                        Layer::BatchNorm(bn) => {
                            let (y, cache) = bn.forward(&x, Mode::Train)?;
                            (
                                y,
                                LayerCache::BatchNorm(cache.ok_or(Error::MissingCache(index))?),
                            )
                        }
                        Layer::Relu => (relu(&x), LayerCache::Input(x)),
                        Layer::Dropout(d) => {
                            let (y, mask) = dropout(
                                &x,
                                d.rate,
                                Mode::Train,
                                seed::derive(dropout_seed, index as u64),
                            )?;
                            (y, LayerCache::Dropout(mask))
                        }
                        Layer::Dense(d) => (d.forward(&x)?, LayerCache::Input(x)),
                    };
                    caches.push(cache);
                    x = y;
                }
                (self.scores(x)?, caches)
            }
        };
        let (loss, grad_logits) = softmax_cross_entropy(&logits, labels)?;
        let predictions = (0..logits.rows()).map(|r| argmax(logits.row(r))).collect();
        Ok(ForwardPass {
            loss,
            logits,
            predictions,
            grad_logits,
            caches,
        })
    }

    /// Gradients of the mean loss for every parameter, in [`Self::params`]
    /// order and with matching shapes. Needs a train-mode pass.
    pub fn backward(&self, pass: &ForwardPass<T>) -> Result<Vec<Matrix<T>>> {
        if pass.caches.len() != self.layers.len() {
            return Err(Error::MissingCache(pass.caches.len()));
        }
        let (n, k) = pass.grad_logits.shape();
        let mut grad = Tensor4::new([n, k, 1, 1], pass.grad_logits.data().to_vec())?;
        let mut per_layer: Vec<Vec<Matrix<T>>> = vec![Vec::new(); self.layers.len()];
        for (index, (layer, cache)) in self.layers.iter().zip(&pass.caches).enumerate().rev() {
            let need_input = index > 0;
            let missing = || Error::MissingCache(index);
            let next = match (layer, cache) {
                (Layer::Conv(l), LayerCache::Input(x)) => {
                    let g = l.backward(x, &grad, need_input)?;
                    per_layer[index] = vec![g.weights, row(g.bias)?];
                    g.input
                }
                (Layer::Projection(p), LayerCache::Input(x)) => {
                    let (gi, gu) = p.backward(x, &grad, need_input)?;
                    per_layer[index] = vec![gu];
                    gi
                }
                (Layer::MaxPool { .. }, LayerCache::Pool(idx)) => {
                    Some(maxpool_backward(idx, &grad)?)
                }
                (Layer::BatchNorm(bn), LayerCache::BatchNorm(c)) => {
                    let g = bn.backward(c, &grad)?;
                    per_layer[index] = vec![row(g.gamma)?, row(g.shift)?];
                    Some(g.input)
                }
                (Layer::Relu, LayerCache::Input(x)) => Some(relu_backward(x, &grad)?),
                (Layer::Dropout(_), LayerCache::Dropout(mask)) => {
                    Some(dropout_backward(mask.as_ref(), &grad)?)
                }
                (Layer::Dense(d), LayerCache::Input(x)) => {
                    let g = d.backward(x, &grad, need_input)?;
                    per_layer[index] = vec![g.weights, row(g.bias)?];
                    g.input
                }
                _ => return Err(missing()),
            };
            if need_input {
                grad = next.ok_or_else(missing)?;
            }
        }
        Ok(per_layer.into_iter().flatten().collect())
    }

    /// Trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<Param<'_, T>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(l) => {
                    let (rows, cols) = l.weights.shape();
                    out.push(Param {
                        name: format!("{i}.conv.weights"),
                        kind: ParamKind::Weight,
                        rows,
                        cols,
                        value: l.weights.data(),
                    });
                    out.push(bias_param(
                        format!("{i}.conv.bias"),
                        ParamKind::Bias,
                        &l.bias,
                    ));
                }
                Layer::Projection(p) => {
                    let (rows, cols) = p.u.shape();
                    out.push(Param {
                        name: format!("{i}.projection.u"),
                        kind: ParamKind::Projection {
                            constrained: p.constrained,
                        },
                        rows,
                        cols,
                        value: p.u.data(),
                    });
                }
                Layer::BatchNorm(bn) => {
                    out.push(bias_param(
                        format!("{i}.batchnorm.gamma"),
                        ParamKind::BnAffine,
                        &bn.gamma,
                    ));
                    out.push(bias_param(
                        format!("{i}.batchnorm.shift"),
                        ParamKind::BnAffine,
                        &bn.shift,
                    ));
                }
                Layer::Dense(d) => {
                    let (rows, cols) = d.weights.shape();
                    out.push(Param {
                        name: format!("{i}.dense.weights"),
                        kind: ParamKind::Weight,
                        rows,
                        cols,
                        value: d.weights.data(),
                    });
                    out.push(bias_param(
                        format!("{i}.dense.bias"),
                        ParamKind::Bias,
                        &d.bias,
                    ));
                }
                Layer::MaxPool { .. } | Layer::Relu | Layer::Dropout(_) => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Conv(l) => {
                    let (rows, cols) = l.weights.shape();
                    out.push(ParamMut {
                        name: format!("{i}.conv.weights"),
                        kind: ParamKind::Weight,
                        rows,
                        cols,
                        value: l.weights.data_mut(),
                    });
                    out.push(bias_param_mut(
                        format!("{i}.conv.bias"),
                        ParamKind::Bias,
                        &mut l.bias,
                    ));
                }
                Layer::Projection(p) => {
                    let (rows, cols) = p.u.shape();
                    out.push(ParamMut {
                        name: format!("{i}.projection.u"),
                        kind: ParamKind::Projection {
                            constrained: p.constrained,
                        },
                        rows,
                        cols,
                        value: p.u.data_mut(),
                    });
                }
                Layer::BatchNorm(bn) => {
                    out.push(bias_param_mut(
                        format!("{i}.batchnorm.gamma"),
                        ParamKind::BnAffine,
                        &mut bn.gamma,
                    ));
                    out.push(bias_param_mut(
                        format!("{i}.batchnorm.shift"),
                        ParamKind::BnAffine,
                        &mut bn.shift,
                    ));
                }
                Layer::Dense(d) => {
                    let (rows, cols) = d.weights.shape();
                    out.push(ParamMut {
                        name: format!("{i}.dense.weights"),
                        kind: ParamKind::Weight,
                        rows,
                        cols,
                        value: d.weights.data_mut(),
                    });
                    out.push(bias_param_mut(
                        format!("{i}.dense.bias"),
                        ParamKind::Bias,
                        &mut d.bias,
                    ));
                }
                Layer::MaxPool { .. } | Layer::Relu | Layer::Dropout(_) => {}
            }
        }
        out
    }

    /// Batch-norm running statistics, `(name, values)`.
    pub fn buffers(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::BatchNorm(bn) = layer {
                out.push((
                    format!("{i}.batchnorm.running_mean"),
                    bn.running_mean.as_slice(),
                ));
                out.push((
                    format!("{i}.batchnorm.running_var"),
                    bn.running_var.as_slice(),
                ));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Layer::BatchNorm(bn) = layer {
                out.push((
                    format!("{i}.batchnorm.running_mean"),
                    bn.running_mean.as_mut_slice(),
                ));
                out.push((
                    format!("{i}.batchnorm.running_var"),
                    bn.running_var.as_mut_slice(),
                ));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, floored_relative_error};
    use crate::model::config::{builtin_config, stacked_config, Architecture};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> NetworkConfig {
        NetworkConfig::parse(
            "network name=tiny classes=3 input=2x8x8\n\
             conv kernel=3 maps=4 stride=1 pad=1\n\
             hope_projection kernel=2 maps=5 stride=2 pad=0\n\
             maxpool size=2 stride=2\n\
             batchnorm\n\
             relu\n\
             dense units=3\n\
             softmax_ce\n",
        )
        .unwrap()
    }

    #[test]
    fn builtin_output_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for arch in [Architecture::HopeInput, Architecture::HopePooling] {
            let net = Network::<f32>::build(&stacked_config(arch, 10, 2), 1).unwrap();
            let x = Tensor4::from_fn([2, 3, 32, 32], |_| rng.random_range(-1.0f32..1.0)).unwrap();
            assert_eq!(net.logits(&x).unwrap().shape(), (2, 10));
        }
    }

    #[test]
    fn full_baseline_parameter_count() {
        let net = Network::<f32>::build(&builtin_config(Architecture::Baseline, 10), 0).unwrap();
        let convs: usize = [
            (3, 64),
            (64, 64),
            (64, 128),
            (128, 128),
            (128, 256),
            (256, 256),
            (256, 256),
        ]
        .iter()
        .chain(&[
            (256, 512),
            (512, 512),
            (512, 512),
            (512, 512),
            (512, 512),
            (512, 512),
        ])
        .map(|&(i, o)| 9 * i * o + o + 2 * o)
        .sum();
        let head = 512 * 512 + 512 + 2 * 512 + 512 * 10 + 10;
        assert_eq!(net.param_count(), convs + head);
    }

    #[test]
    fn build_is_deterministic_in_seed() {
        let cfg = tiny_config();
        let a = Network::<f64>::build(&cfg, 5).unwrap();
        assert_eq!(a, Network::<f64>::build(&cfg, 5).unwrap());
        assert_ne!(a, Network::<f64>::build(&cfg, 6).unwrap());
    }

    #[test]
    fn backward_requires_train_pass() {
        let mut net = Network::<f64>::build(&tiny_config(), 1).unwrap();
        let x = Tensor4::filled([2, 2, 8, 8], 0.5).unwrap();
        let pass = net.forward(&x, &[0, 1], Mode::Eval, 0).unwrap();
        assert!(matches!(net.backward(&pass), Err(Error::MissingCache(_))));
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let net = Network::<f64>::build(&tiny_config(), 1).unwrap();
        assert!(net.logits(&Tensor4::zeros([2, 3, 8, 8]).unwrap()).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = Network::<f64>::build(&tiny_config(), 2).unwrap();
        let x = Tensor4::from_fn([4, 2, 8, 8], |_| rng.random_range(-1.0..1.0)).unwrap();
        let labels = [0, 2, 1, 2];
        let pass = net.clone().forward(&x, &labels, Mode::Train, 0).unwrap();
        let grads = net.backward(&pass).unwrap();
        let shapes: Vec<(usize, usize)> = net.params().iter().map(|p| (p.rows, p.cols)).collect();
        assert_eq!(grads.iter().map(|g| g.shape()).collect::<Vec<_>>(), shapes);
        for (pi, g) in grads.iter().enumerate() {
            let mut v = net.params()[pi].value.to_vec();
            let fd = central_difference(&mut v, 1e-5, |vals| {
                let mut probe = net.clone();
                probe.params_mut()[pi].value.copy_from_slice(vals);
                probe.forward(&x, &labels, Mode::Train, 0).unwrap().loss
            });
            let err = floored_relative_error(g.data(), &fd, 1e-6);
            assert!(err < 1e-4, "param {pi}: {err}");
        }
    }
}
