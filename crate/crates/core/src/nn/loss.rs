use super::{Scalar, Tensor};

/// Mean categorical cross-entropy of `logits` (`B × classes`) against
/// `labels`, with max-subtraction. Returns the loss and `∂loss/∂logits`,
/// whose rows each sum to zero.
///
/// Panics if `labels.len()` differs from the batch size.
pub fn loss_ce<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> (T, Tensor<T>) {
    let b = logits.shape()[0];
    assert_eq!(labels.len(), b, "one label per logit row");
    let k = logits.len() / b.max(1);
    let inv_b = T::one() / T::from_f64(b as f64);
    let mut grad = Vec::with_capacity(logits.len());
    let mut total = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        total += sum.ln() + max - row[label as usize];
        let inv_sum = T::one() / sum;
        let start = grad.len();
        grad.extend(exps.iter().map(|&e| e * inv_sum * inv_b));
        grad[start + label as usize] -= inv_b;
    }
    let grad = Tensor::from_vec(&[b, k], grad).expect("same shape as logits");
    (total * inv_b, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn uniform_logits_give_ln_256() {
        let logits = Tensor::<f64>::full(&[3, 256], 0.7);
        let (loss, _) = loss_ce(&logits, &[0, 17, 255]);
        assert!((loss - 256f64.ln()).abs() < 1e-12);
        assert!((loss - 5.5452).abs() < 1e-4);
        let logits = Tensor::<f32>::zeros(&[1, 256]);
        assert!((loss_ce(&logits, &[9]).0 - 5.5452).abs() < 1e-4);
    }

    #[test]
    fn loss_decreases_with_true_logit_margin() {
        let mut prev = f64::INFINITY;
        for m in 0..20 {
            let mut logits = Tensor::<f64>::zeros(&[1, 256]);
            logits.data_mut()[42] = m as f64 * 0.5;
            let (l, _) = loss_ce(&logits, &[42]);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn stable_for_huge_logits() {
        let mut logits = Tensor::<f32>::zeros(&[1, 256]);
        logits.data_mut()[3] = 1e4;
        let (l, g) = loss_ce(&logits, &[3]);
        assert!(l.abs() < 1e-6);
        assert!(g.all_finite());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let b = 3;
        let data: Vec<f64> = (0..b * 256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let logits = Tensor::from_vec(&[b, 256], data).unwrap();
        let labels = [5u8, 200, 77];
        let (_, grad) = loss_ce(&logits, &labels);
        for r in 0..b {
            assert!(grad.row(r).iter().sum::<f64>().abs() < 1e-6);
        }
        let h = 1e-5;
        let mut worst = 0.0f64;
        for idx in (0..b * 256).step_by(7).chain([5, 256 + 200, 512 + 77]) {
            let mut plus = logits.clone();
            plus.data_mut()[idx] += h;
            let mut minus = logits.clone();
            minus.data_mut()[idx] -= h;
            let fd = (loss_ce(&plus, &labels).0 - loss_ce(&minus, &labels).0) / (2.0 * h);
            let a = grad.data()[idx];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()));
        }
        assert!(worst < 1e-6, "worst = {worst}");
    }
}
