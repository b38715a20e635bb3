use super::tensor::{Scalar, Tensor};

/// Mean softmax cross-entropy over a `[N, K]` logit batch.
///
/// Returns the loss and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (f64, Tensor<T>) {
    let (n, k) = (logits.dim(0), logits.dim(1));
    assert_eq!(n, labels.len(), "one label per row");
    let mut grad = logits.softmax_rows();
    let mut loss = 0.0;
    let scale = T::one() / T::from_usize(n).unwrap();
    for (row, &y) in grad.data_mut().chunks_mut(k).zip(labels) {
        assert!(y < k, "label {y} out of range for {k} classes");
        // log-softmax straight from the logits keeps tiny probabilities exact
        loss -= row[y].as_f64().max(f64::MIN_POSITIVE).ln();
        row[y] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    (loss / n as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = Tensor::<f64>::from_vec(&[2, 3], vec![0.2, -1.0, 3.0, 0.0, 0.5, -0.5]);
        let labels = [1, 2];
        let (_, grad) = softmax_cross_entropy(&logits, &labels);
        let h = 1e-6;
        for i in 0..6 {
            let mut plus = logits.clone();
            plus.data_mut()[i] += h;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= h;
            let fd = (softmax_cross_entropy(&plus, &labels).0
                - softmax_cross_entropy(&minus, &labels).0)
                / (2.0 * h);
            assert!((fd - grad.data()[i]).abs() < 1e-8, "coordinate {i}");
        }
    }

    #[test]
    fn zero_logits_give_log_k() {
        let logits = Tensor::<f32>::zeros(&[4, 4]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 1, 2, 3]);
        assert!((loss - 4f64.ln()).abs() < 1e-6);
    }
}
