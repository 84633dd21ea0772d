//! Label-smoothed cross entropy.

use crate::error::{Error, Result};
use crate::tensor::tape::{InputSlot, Tape, TapeOp};
use crate::tensor::{Element, Tensor};

struct CrossEntropyOp<E: Element> {
    probs: Vec<E>,
    labels: Vec<usize>,
    logits: InputSlot<E>,
    n: usize,
    k: usize,
    eps: E,
}

impl<E: Element> TapeOp<E> for CrossEntropyOp<E> {
    fn backward(&self, g: &[E]) {
        let upstream = g[0] / E::from_f64(self.n as f64);
        let off = self.eps / E::from_f64(self.k as f64);
        let on = E::one() - self.eps + off;
        let mut dl = vec![E::zero(); self.n * self.k];
        for row in 0..self.n {
            let label = self.labels[row];
            for col in 0..self.k {
                let q = if col == label { on } else { off };
                dl[row * self.k + col] = (self.probs[row * self.k + col] - q) * upstream;
            }
        }
        self.logits.add(&dl);
    }
}

/// Mean over the batch of `-sum_k q_k log softmax(logits)_k` with
/// `q = (1 - eps) one_hot + eps / K`, stabilized by max subtraction.
pub fn cross_entropy_smoothed<E: Element>(
    tape: &Tape<E>,
    logits: &Tensor<E>,
    labels: &[usize],
    eps: f64,
) -> Result<Tensor<E>> {
    let s = logits.shape();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::Shape(format!(
            "cross entropy needs [n x k] logits with k >= 2, got {:?}",
            s
        )));
    }
    let (n, k) = (s[0], s[1]);
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for batch of {}",
            labels.len(),
            n
        )));
    }
    for &label in labels {
        if label >= k {
            return Err(Error::Label { label, classes: k });
        }
    }
    let e = E::from_f64(eps);
    let mut probs = vec![E::zero(); n * k];
    let mut total = E::zero();
    {
        let ld = logits.data();
        for row in 0..n {
            let z = &ld[row * k..(row + 1) * k];
            let mut max = z[0];
            for &v in &z[1..] {
                if v > max {
                    max = v;
                }
            }
            let mut sum_exp = E::zero();
            let mut sum_shift = E::zero();
            for &v in z {
                sum_exp = sum_exp + (v - max).exp();
                sum_shift = sum_shift + (v - max);
            }
            let lse = sum_exp.ln();
            for (col, &v) in z.iter().enumerate() {
                probs[row * k + col] = ((v - max) - lse).exp();
            }
            let on_term = (E::one() - e) * (z[labels[row]] - max);
            let smooth_term = e / E::from_f64(k as f64) * sum_shift;
            total = total + lse - on_term - smooth_term;
        }
    }
    let mean = total / E::from_f64(n as f64);
    let mut out = Tensor::scalar(mean);
    if logits.needs_grad() {
        let op = CrossEntropyOp {
            probs,
            labels: labels.to_vec(),
            logits: InputSlot::of(logits),
            n,
            k,
            eps: e,
        };
        tape.record(&mut out, Box::new(op));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let tape = Tape::<f64>::new();
        let logits = Tensor::from_vec(&[1, 3], vec![50.0, 0.0, 0.0]).unwrap();
        let loss = cross_entropy_smoothed(&tape, &logits, &[0], 0.0).unwrap();
        assert!(loss.data()[0] < 1e-10, "loss {}", loss.data()[0]);
    }

    #[test]
    fn uniform_logits_cost_log_k() {
        let tape = Tape::<f64>::new();
        let logits = Tensor::from_vec(&[2, 4], vec![0.3; 8]).unwrap();
        for eps in [0.0, 0.1, 0.5] {
            let loss = cross_entropy_smoothed(&tape, &logits, &[1, 3], eps).unwrap();
            assert!((loss.data()[0] - 4.0f64.ln()).abs() < 1e-12, "eps {eps}");
        }
    }

    #[test]
    fn invalid_label_is_rejected() {
        let tape = Tape::<f64>::new();
        let logits = Tensor::<f64>::zeros(&[1, 3]);
        let err = cross_entropy_smoothed(&tape, &logits, &[3], 0.1).unwrap_err();
        assert!(matches!(err, Error::Label { label: 3, classes: 3 }));
    }

    #[test]
    fn gradient_is_probs_minus_smoothed_target() {
        let tape = Tape::<f64>::new();
        let logits = Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap().requires_grad();
        let loss = cross_entropy_smoothed(&tape, &logits, &[0], 0.1).unwrap();
        tape.backward(&loss).unwrap();
        let g = logits.grad().unwrap();
        let p0 = (1.0f64).exp() / ((1.0f64).exp() + (-1.0f64).exp());
        let q0 = 0.9 + 0.05;
        assert!((g[0] - (p0 - q0)).abs() < 1e-12);
        assert!((g[1] - ((1.0 - p0) - 0.05)).abs() < 1e-12);
    }
}
