use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Row-wise softmax of `[m, classes]` logits, computed with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, classes) = logits.dims2("softmax")?;
    let mut out = logits.clone();
    if classes == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_exact_mut(classes) {
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
    Ok(out)
}

/// Mean softmax cross-entropy and its gradient `(softmax - onehot) / m`.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (m, classes) = logits.dims2("softmax_xent")?;
    if labels.len() != m {
        return Err(Error::Dimension(format!(
            "{} labels for {m} logit rows",
            labels.len()
        )));
    }
    if m == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Argument(format!(
            "label {bad} outside [0, {classes})"
        )));
    }
    let inv_m = T::one() / T::of(m as f64);
    let mut grad = logits.clone();
    let mut loss = T::zero();
    for (row, &label) in grad.data_mut().chunks_exact_mut(classes).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let log_total = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss -= row[label] - max - log_total;
        for v in row.iter_mut() {
            *v = (*v - max - log_total).exp() * inv_m;
        }
        row[label] -= inv_m;
    }
    let loss = loss * inv_m;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("cross-entropy loss is {loss}")));
    }
    Ok((loss, grad))
}

/// Index of the largest entry in each row (lowest index on ties).
pub fn argmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Vec<usize>> {
    let (_, classes) = x.dims2("argmax")?;
    Ok(x
        .data()
        .chunks_exact(classes.max(1))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect())
}
