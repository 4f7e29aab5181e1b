use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Mean cross-entropy over the batch and its gradient `(softmax − onehot)/N`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Matrix<T>,
    labels: &[usize],
) -> Result<(T, Matrix<T>)> {
    let (n, k) = logits.shape();
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy labels",
            format!("{} labels", labels.len()),
            format!("{n} logit rows"),
        ));
    }
    if let Some((record, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::LabelOutOfRange {
            record,
            label,
            classes: k,
        });
    }
    let mut grad = softmax(logits);
    let inv_n = T::one() / T::of(n as f64);
    let mut loss = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        loss += lse - row[label];
        let g = grad.row_mut(r);
        g[label] -= T::one();
        g.iter_mut().for_each(|v| *v *= inv_n);
    }
    Ok((loss * inv_n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_ln_k() {
        let (loss, _) = softmax_cross_entropy(&Matrix::<f64>::zeros(3, 10), &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - std::f64::consts::LN_10).abs() < 1e-6);
    }

    #[test]
    fn symmetric_two_class() {
        let (loss, grad) = softmax_cross_entropy(&Matrix::<f64>::zeros(1, 2), &[0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(grad.data(), &[-0.5, 0.5]);
        let (_, grad2) = softmax_cross_entropy(&Matrix::<f64>::zeros(2, 2), &[0, 0]).unwrap();
        assert_eq!(grad2.row(0), &[-0.25, 0.25]);
    }

    #[test]
    fn out_of_range_label_names_record() {
        let err = softmax_cross_entropy(&Matrix::<f64>::zeros(3, 4), &[0, 1, 4]).unwrap_err();
        assert!(matches!(
            err,
            Error::LabelOutOfRange {
                record: 2,
                label: 4,
                classes: 4
            }
        ));
    }

    #[test]
    fn stable_for_huge_logits() {
        let logits = Matrix::<f32>::from_rows(&[&[1000.0, -1000.0, 0.0]]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-6);
        assert!(grad.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = Matrix::<f32>::new(
            5,
            7,
            (0..35).map(|_| rng.random_range(-20.0..20.0)).collect(),
        )
        .unwrap();
        let p = softmax(&logits);
        for r in 0..5 {
            assert!(p.row(r).iter().all(|&v| v >= 0.0));
            assert!((p.row(r).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits =
            Matrix::<f64>::new(4, 5, (0..20).map(|_| rng.random_range(-2.0..2.0)).collect())
                .unwrap();
        let labels = [1, 0, 4, 2];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let mut v = logits.data().to_vec();
        let fd = central_difference(&mut v, 1e-5, |v| {
            softmax_cross_entropy(&Matrix::new(4, 5, v.to_vec()).unwrap(), &labels)
                .unwrap()
                .0
        });
        assert!(relative_error(grad.data(), &fd) < 1e-7);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 2usize..12, spread in 0.1f32..60.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Matrix::<f32>::new(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.random_range(-spread..spread)).collect(),
            )
            .unwrap();
            let p = softmax(&logits);
            for r in 0..rows {
                prop_assert!(p.row(r).iter().all(|&v| v >= 0.0));
                prop_assert!((p.row(r).iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
