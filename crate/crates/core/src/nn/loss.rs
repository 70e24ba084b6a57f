use super::{NnError, Tensor};

/// Mean softmax cross-entropy over the batch, with the gradient w.r.t. the
/// logits. Uses max-subtracted log-sum-exp, so saturated logits stay finite.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), NnError> {
    let batch = logits.rows();
    let classes = logits.row_width();
    if batch == 0 || labels.len() != batch {
        return Err(NnError::ShapeMismatch {
            context: "labels per logit row",
            expected: batch,
            actual: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(NnError::LabelOutOfRange { label, classes });
    }
    let inv_batch = 1.0 / batch as f64;
    let mut grad = Tensor::zeros(vec![batch, classes]);
    let mut total = 0.0;
    for (n, &y) in labels.iter().enumerate() {
        let row = logits.row(n);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[y];
        let g = grad.row_mut(n);
        for (gc, v) in g.iter_mut().zip(row) {
            *gc = (v - log_z).exp() * inv_batch;
        }
        g[y] -= inv_batch;
    }
    let loss = total * inv_batch;
    if !loss.is_finite() {
        return Err(NnError::NonFinite("cross-entropy loss"));
    }
    Ok((loss, grad))
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = super::argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    hits as f64 / labels.len() as f64
}
