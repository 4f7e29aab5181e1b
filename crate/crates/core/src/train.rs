//! Epoch loop, validation and per-epoch metrics.

use std::fmt;
use std::time::Instant;

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::hope::{ortho_measure, penalty_value};
use crate::layers::Mode;
use crate::model::Network;
use crate::optim::TrainState;
use crate::scalar::Scalar;
use crate::seed;

pub const METRICS_HEADER: &str =
    "epoch,train_loss,train_err,val_err,lr,beta,penalty_sum,ortho_max,seconds";

const DROPOUT_SALT: u64 = 0xD20;

/// One row of `metrics.csv`. `epoch` counts completed epochs (1-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_err: f64,
    pub val_err: f64,
    pub lr: f64,
    pub beta: f64,
    pub penalty_sum: f64,
    pub ortho_max: f64,
    pub seconds: f64,
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.train_loss,
            self.train_err,
            self.val_err,
            self.lr,
            self.beta,
            self.penalty_sum,
            self.ortho_max,
            self.seconds
        )
    }
}

/// Validation outcome in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// Fraction misclassified.
    pub error: f64,
    /// Per-class accuracy; `NaN` for classes absent from the split.
    pub per_class: Vec<f64>,
}

/// Penalty sum over every projection layer and the worst ortho measure
/// among them; both zero when the network has none.
pub fn projection_summary<T: Scalar>(net: &Network<T>) -> Result<(f64, f64)> {
    let mut sum = 0.0;
    let mut worst: f64 = 0.0;
    for (_, p) in net.projections() {
        sum += penalty_value(&p.u)?.as_f64();
        worst = worst.max(ortho_measure(&p.u)?.as_f64());
    }
    Ok((sum, worst))
}

/// Batch norm needs at least two samples per batch.
pub fn check_batch(n: usize, batch: usize) -> Result<()> {
    if batch < 2 || batch > n {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch} must be in 2..={n}"
        )));
    }
    if n % batch == 1 {
        return Err(Error::InvalidArgument(format!(
            "{n} samples with batch {batch} leave a final batch of one"
        )));
    }
    Ok(())
}

/// Eval-mode loss, error rate and per-class accuracy over `data`.
pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    data: &Dataset<T>,
    batch: usize,
) -> Result<Evaluation> {
    if data.num_classes != net.num_classes() {
        return Err(Error::ClassMismatch {
            network: net.num_classes(),
            dataset: data.num_classes,
        });
    }
    let mut loss = 0.0;
    let mut hits = vec![0usize; data.num_classes];
    for chunk in data.sequential(batch) {
        let (x, labels) = chunk?;
        let (l, preds) = net.evaluate(&x, &labels)?;
        loss += l.as_f64() * labels.len() as f64;
        for (p, &y) in preds.iter().zip(&labels) {
            if *p == y {
                hits[y] += 1;
            }
        }
    }
    let n = data.len() as f64;
    let correct: usize = hits.iter().sum();
    let per_class = hits
        .iter()
        .zip(data.class_counts())
        .map(|(&h, c)| {
            if c == 0 {
                f64::NAN
            } else {
                h as f64 / c as f64
            }
        })
        .collect();
    Ok(Evaluation {
        loss: loss / n,
        error: 1.0 - correct as f64 / n,
        per_class,
    })
}

/// One pass over `train` at `epoch` (0-based). Returns mean loss and the
/// training error rate measured on the dropout-perturbed forward passes.
pub fn train_epoch<T: Scalar>(
    net: &mut Network<T>,
    state: &mut TrainState<T>,
    train: &Dataset<T>,
    epoch: usize,
) -> Result<(f64, f64)> {
    let batch = state.hyper.batch;
    check_batch(train.len(), batch)?;
    if train.num_classes != net.num_classes() {
        return Err(Error::ClassMismatch {
            network: net.num_classes(),
            dataset: train.num_classes,
        });
    }
    state.set_epoch(epoch);
    let dropout_base = seed::derive(state.seed, DROPOUT_SALT);
    let mut loss = 0.0;
    let mut wrong = 0usize;
    for (b, chunk) in batches(train, batch, state.seed, epoch)?.enumerate() {
        let (x, labels) = chunk?;
        let pass = net.forward(
            &x,
            &labels,
            Mode::Train,
            seed::derive2(dropout_base, epoch as u64, b as u64),
        )?;
        let grads = net.backward(&pass)?;
        state.step(net, &grads)?;
        loss += pass.loss.as_f64() * labels.len() as f64;
        wrong += pass
            .predictions
            .iter()
            .zip(&labels)
            .filter(|(p, y)| p != y)
            .count();
    }
    let n = train.len() as f64;
    Ok((loss / n, wrong as f64 / n))
}

/// Trains epoch `state.epoch`, validates, and advances `state.epoch`.
/// `seconds` is left at zero unless `timed`.
pub fn run_epoch<T: Scalar>(
    net: &mut Network<T>,
    state: &mut TrainState<T>,
    train: &Dataset<T>,
    val: &Dataset<T>,
    timed: bool,
) -> Result<EpochMetrics> {
    let start = Instant::now();
    let epoch = state.epoch;
    let (train_loss, train_err) = train_epoch(net, state, train, epoch)?;
    let eval = evaluate(net, val, state.hyper.batch)?;
    let (penalty_sum, ortho_max) = projection_summary(net)?;
    state.epoch = epoch + 1;
    Ok(EpochMetrics {
        epoch: epoch + 1,
        train_loss,
        train_err,
        val_err: eval.error,
        lr: state.gamma,
        beta: state.beta,
        penalty_sum,
        ortho_max,
        seconds: if timed {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_split, Colorspace};
    use crate::model::NetworkConfig;
    use crate::optim::Hyperparameters;

    fn small_config(constrained: bool) -> NetworkConfig {
        let proj = if constrained {
            "hope_projection"
        } else {
            "lin_projection"
        };
        NetworkConfig::parse(&format!(
            "network name=small classes=4 input=3x32x32\n\
             {proj} kernel=3 maps=8 stride=1 pad=1\n\
             conv kernel=3 maps=8 stride=1 pad=1\n\
             batchnorm\nrelu\n\
             maxpool size=4 stride=4\n\
             maxpool size=4 stride=4\n\
             dense units=4\nsoftmax_ce\n"
        ))
        .unwrap()
    }

    fn setup(constrained: bool) -> (Network<f32>, TrainState<f32>, Dataset<f32>, Dataset<f32>) {
        let net = Network::build(&small_config(constrained), 5).unwrap();
        let hyper = Hyperparameters {
            batch: 20,
            ..Hyperparameters::default()
        };
        let state = TrainState::new(&net, hyper, 5).unwrap();
        let (train, val) = synthetic_split(80, 40, 4, 5, Colorspace::Yuv).unwrap();
        (net, state, train, val)
    }

    #[test]
    fn csv_row_matches_header() {
        let m = EpochMetrics {
            epoch: 3,
            train_loss: 1.5,
            train_err: 0.25,
            val_err: 0.5,
            lr: 0.06,
            beta: 0.15,
            penalty_sum: 0.0,
            ortho_max: 0.0,
            seconds: 0.0,
        };
        let row = m.to_string();
        assert_eq!(row, "3,1.5,0.25,0.5,0.06,0.15,0,0,0.000");
        assert_eq!(row.split(',').count(), METRICS_HEADER.split(',').count());
    }

    #[test]
    fn batch_of_one_rejected() {
        assert!(check_batch(101, 100).is_err());
        assert!(check_batch(100, 1).is_err());
        assert!(check_batch(100, 101).is_err());
        check_batch(102, 100).unwrap();
    }

    #[test]
    fn epoch_is_deterministic_and_advances() {
        let (mut a, mut sa, train, val) = setup(true);
        let (mut b, mut sb, _, _) = setup(true);
        let ma = run_epoch(&mut a, &mut sa, &train, &val, false).unwrap();
        let mb = run_epoch(&mut b, &mut sb, &train, &val, false).unwrap();
        assert_eq!(ma.to_string(), mb.to_string());
        assert_eq!(a, b);
        assert_eq!((ma.epoch, sa.epoch), (1, 1));
        assert_eq!(ma.lr, 0.06);
        assert!(ma.penalty_sum > 0.0);
    }

    #[test]
    fn evaluation_is_side_effect_free() {
        let (net, _, _, val) = setup(false);
        let before = net.clone();
        let e1 = evaluate(&net, &val, 7).unwrap();
        let e2 = evaluate(&net, &val, 40).unwrap();
        assert_eq!(net, before);
        assert_eq!(e1.error, e2.error);
        assert!((e1.loss - e2.loss).abs() < 1e-5);
        assert_eq!(e1.per_class.len(), 4);
    }

    #[test]
    fn untrained_loss_near_chance() {
        let mut net = Network::<f32>::build(
            &crate::model::builtin_config(crate::model::Architecture::HopeInput, 10),
            1,
        )
        .unwrap();
        let (_, val) = synthetic_split::<f32>(20, 100, 10, 1, Colorspace::Yuv).unwrap();
        let e = evaluate(&net, &val, 100).unwrap();
        assert!((e.loss - 10f64.ln()).abs() < 0.3, "eval loss {}", e.loss);
        let pass = net
            .forward(&val.images, &val.labels, Mode::Train, 1)
            .unwrap();
        assert!(
            (pass.loss as f64 - 10f64.ln()).abs() < 0.3,
            "train loss {}",
            pass.loss
        );
        assert_eq!(pass.predictions.len(), 100);
    }

    #[test]
    fn class_mismatch_is_reported() {
        let (net, _, _, _) = setup(true);
        let (_, val) = synthetic_split::<f32>(20, 20, 3, 1, Colorspace::Yuv).unwrap();
        assert!(matches!(
            evaluate(&net, &val, 10),
            Err(Error::ClassMismatch {
                network: 4,
                dataset: 3
            })
        ));
    }
}
