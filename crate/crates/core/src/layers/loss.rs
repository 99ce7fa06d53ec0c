use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Mean softmax cross-entropy over the batch. `logits` is `(batch, classes, 1, 1)`
/// or any shape whose item length is the class count. Returns the loss and
/// dLoss/dlogits.
pub fn softmax_xent<T: Scalar>(logits: &Tensor4<T>, labels: &[usize]) -> Result<(f64, Tensor4<T>)> {
    let s = logits.shape();
    let k = s.item_len();
    if labels.len() != s.batch {
        return Err(Error::shape(format!(
            "{} labels for batch of {}",
            labels.len(),
            s.batch
        )));
    }
    let inv_batch = 1.0 / s.batch as f64;
    let mut grad = logits.zeros_like();
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Label { label, classes: k });
        }
        let row = &logits.data()[b * k..(b + 1) * k];
        let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + max - row[label].f64();
        for (j, (g, e)) in grad.data_mut()[b * k..(b + 1) * k].iter_mut().zip(&exps).enumerate() {
            let target = if j == label { 1.0 } else { 0.0 };
            *g = T::of((e / z - target) * inv_batch);
        }
    }
    Ok((loss * inv_batch, grad))
}
