use crate::error::{Error, Result};
use crate::numerics::{DenseArray, GradMap, Scalar, Tape, Var};

/// Row-wise softmax of a `(batch, classes)` array.
pub fn softmax<T: Scalar>(logits: &DenseArray<T>) -> DenseArray<T> {
    let classes = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.values_mut().chunks_mut(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &DenseArray<T>,
    labels: &[usize],
) -> Result<(T, DenseArray<T>)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape {
            layer: "softmax cross-entropy".to_owned(),
            expected: vec![labels.len(), shape.last().copied().unwrap_or(0)],
            actual: shape.to_vec(),
        });
    }
    let (batch, classes) = (shape[0], shape[1]);
    for (sample, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange {
                sample,
                label,
                classes,
            });
        }
    }
    let inv_batch = T::one() / T::lit(batch as f64);
    let mut grad = softmax(logits);
    let mut loss = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits.values()[r * classes..(r + 1) * classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss += lse - row[label];
        let g = &mut grad.values_mut()[r * classes..(r + 1) * classes];
        g[label] -= T::one();
        for v in g.iter_mut() {
            *v *= inv_batch;
        }
    }
    let loss = loss * inv_batch;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".to_owned()));
    }
    Ok((loss, grad))
}

/// Cross-entropy of the tape output `logits` and the gradients of every
/// parameter leaf reachable from it.
pub fn loss_and_grad<T: Scalar>(tape: &Tape<T>, logits: Var, labels: &[usize]) -> Result<(T, GradMap<T>)> {
    let (loss, dlogits) = softmax_cross_entropy(tape.value(logits), labels)?;
    let grads = tape.backward(vec![(logits, dlogits)])?;
    Ok((loss, grads.param_grads()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln2() {
        let logits = DenseArray::<f64>::from_f64(&[3, 2], &[0.5, 0.5, -1.0, -1.0, 4.0, 4.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 1, 1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn loss_vanishes_with_margin() {
        let mut previous = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let logits = DenseArray::<f64>::from_f64(&[1, 2], &[margin, 0.0]).unwrap();
            let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
            assert!(loss >= 0.0 && loss < previous);
            previous = loss;
        }
        assert!(previous < 1e-20);
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let logits = DenseArray::<f32>::zeros(&[1, 3]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3, .. })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = DenseArray::<f32>::from_f64(&[2, 3], &[1000.0, 0.0, -3.0, 0.1, 0.2, 0.3]).unwrap();
        let p = softmax(&logits);
        for row in p.values().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}
