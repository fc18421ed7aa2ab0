//! Softmax cross-entropy on class logits.
//!
//! Normalization and the negative log-likelihood are fused: log-probabilities
//! are computed as `z - logsumexp(z)` after subtracting the row maximum, and
//! the gradient with respect to the logits is `(p - y) / N`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check_logits<T: Scalar>(logits: &Tensor<T>, op: &str) -> Result<(usize, usize)> {
    logits.expect_rank(2, op, "logits [N, C]")?;
    if let Some(pos) = logits.data().iter().position(|x| !x.is_finite()) {
        return Err(Error::domain(
            op,
            format!("logit {pos} is not finite ({})", logits.data()[pos]),
        ));
    }
    Ok((logits.shape()[0], logits.shape()[1]))
}

fn check_targets(targets: &[usize], n: usize, classes: usize, op: &str) -> Result<()> {
    if targets.len() != n {
        return Err(Error::Input(format!(
            "{op}: {} targets for a batch of {n}",
            targets.len()
        )));
    }
    if let Some((i, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= classes) {
        return Err(Error::Input(format!(
            "{op}: target {i} is class {t}, only {classes} classes exist"
        )));
    }
    Ok(())
}

/// Row-wise log-softmax.
pub fn log_softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = check_logits(logits, "log_softmax")?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
        for z in row.iter_mut() {
            *z = *z - lse;
        }
    }
    Ok(out)
}

/// Row-wise softmax probabilities.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = check_logits(logits, "softmax")?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for z in row.iter_mut() {
            *z = (*z - max).exp();
            total = total + *z;
        }
        for z in row.iter_mut() {
            *z = *z / total;
        }
    }
    Ok(out)
}

/// Mean cross-entropy over the batch and its gradient with respect to the
/// logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<(T, Tensor<T>)> {
    const OP: &str = "softmax_cross_entropy";
    let (n, c) = check_logits(logits, OP)?;
    check_targets(targets, n, c, OP)?;
    let log_p = log_softmax(logits)?;
    let inv_n = T::one() / T::from_usize(n).expect("batch size fits the scalar type");
    let mut loss = T::zero();
    let mut grad = log_p.map(|lp| lp.exp());
    for (i, (&t, row)) in targets
        .iter()
        .zip(grad.data_mut().chunks_mut(c))
        .enumerate()
    {
        loss = loss - log_p.data()[i * c + t];
        row[t] = row[t] - T::one();
        for g in row.iter_mut() {
            *g = *g * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

/// Logits of a batch with their softmax probabilities and target classes.
#[derive(Debug, Clone)]
pub struct BatchPrediction<T = f32> {
    pub logits: Tensor<T>,
    pub probabilities: Tensor<T>,
    pub targets: Vec<usize>,
}

impl<T: Scalar> BatchPrediction<T> {
    pub fn new(logits: Tensor<T>, targets: Vec<usize>) -> Result<Self> {
        let (n, c) = check_logits(&logits, "batch prediction")?;
        check_targets(&targets, n, c, "batch prediction")?;
        let probabilities = softmax(&logits)?;
        Ok(Self {
            logits,
            probabilities,
            targets,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.logits.shape()[1]
    }

    /// Argmax class per row, ties to the lowest index.
    pub fn predicted_classes(&self) -> Vec<usize> {
        argmax_rows(&self.probabilities)
    }

    pub fn loss(&self) -> Result<T> {
        softmax_cross_entropy(&self.logits, &self.targets).map(|(l, _)| l)
    }
}

/// Index of the largest entry in each row of a `[N, C]` tensor; the first
/// maximal index wins ties.
pub fn argmax_rows<T: Scalar>(rows: &Tensor<T>) -> Vec<usize> {
    let c = rows.shape()[rows.rank() - 1];
    rows.data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
