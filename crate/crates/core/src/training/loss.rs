use ndarray::Array2;
use serde::Serialize;

use crate::corpus::{Objective, TrainingBatch};
use crate::error::{Error, Result};
use crate::model::log_softmax_row;
use crate::model::Scalar;

/// Summed cross-entropy over the supervised positions of one sequence, and
/// the number of those positions.
pub fn sequence_cross_entropy<F: Scalar>(
    logits: &Array2<F>,
    targets: &[Option<u32>],
) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    for (k, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            let row = logits.row(k);
            let lp = log_softmax_row(row.as_slice().expect("standard layout"), 1.0);
            sum -= lp[*t as usize];
            count += 1;
        }
    }
    (sum, count)
}

/// Cross-entropy sum of one sequence and its gradient with respect to the
/// logits, multiplied by `scale` (normally one over the batch's position count).
pub fn cross_entropy_with_grad<F: Scalar>(
    logits: &Array2<F>,
    targets: &[Option<u32>],
    scale: f64,
) -> (f64, Array2<F>) {
    let mut grad = Array2::zeros(logits.dim());
    let mut sum = 0.0;
    for (k, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            let row = logits.row(k);
            let lp = log_softmax_row(row.as_slice().expect("standard layout"), 1.0);
            sum -= lp[*t as usize];
            for (j, g) in grad.row_mut(k).iter_mut().enumerate() {
                let p = lp[j].exp();
                let onehot = if j == *t as usize { 1.0 } else { 0.0 };
                *g = F::c((p - onehot) * scale);
            }
        }
    }
    (sum, grad)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    /// Mean over every supervised position of the batch, both modes pooled.
    pub total: f64,
    pub causal: Option<f64>,
    pub masked: Option<f64>,
    pub causal_positions: usize,
    pub masked_positions: usize,
}

impl LossBreakdown {
    pub(crate) fn from_sums(causal: (f64, usize), masked: (f64, usize)) -> Result<Self> {
        let n = causal.1 + masked.1;
        if n == 0 {
            return Err(Error::input("batch has no supervised positions"));
        }
        let mean = |(s, c): (f64, usize)| (c > 0).then(|| s / c as f64);
        Ok(LossBreakdown {
            total: (causal.0 + masked.0) / n as f64,
            causal: mean(causal),
            masked: mean(masked),
            causal_positions: causal.1,
            masked_positions: masked.1,
        })
    }
}

/// Position-weighted mean cross-entropy over a batch; `logits[i]` belongs to
/// `batch.sequences[i]`.
pub fn hybrid_loss<F: Scalar>(
    logits: &[Array2<F>],
    batch: &TrainingBatch,
) -> Result<LossBreakdown> {
    if logits.len() != batch.sequences.len() {
        return Err(Error::input(format!(
            "{} logit matrices for {} sequences",
            logits.len(),
            batch.sequences.len()
        )));
    }
    let mut causal = (0.0, 0);
    let mut masked = (0.0, 0);
    for (l, s) in logits.iter().zip(&batch.sequences) {
        if l.nrows() != s.targets.len() {
            return Err(Error::input("logit rows do not match sequence length"));
        }
        let (sum, n) = sequence_cross_entropy(l, &s.targets);
        let acc = match s.objective {
            Objective::Causal => &mut causal,
            Objective::Masked => &mut masked,
        };
        acc.0 += sum;
        acc.1 += n;
    }
    LossBreakdown::from_sums(causal, masked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{causal_sequence, Sequence};
    use crate::model::{AttentionKind, AttentionMaskSpec};

    fn batch() -> TrainingBatch {
        let causal = causal_sequence(&[0, 5, 6, 7, 3], 3);
        let masked = Sequence {
            inputs: vec![0, 2, 6, 2, 1],
            targets: vec![Some(5), None, Some(7), None, None],
            objective: Objective::Masked,
            mask: AttentionMaskSpec::new(AttentionKind::Bidirectional, 5),
        };
        TrainingBatch {
            sequences: vec![causal, masked],
            seq_len: 5,
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let b = batch();
        let logits = vec![Array2::<f32>::zeros((5, 9)); 2];
        let l = hybrid_loss(&logits, &b).unwrap();
        assert!((l.total - 9f64.ln()).abs() < 1e-12);
        assert!((l.causal.unwrap() - 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_zero_loss() {
        let b = batch();
        let logits: Vec<Array2<f64>> = b
            .sequences
            .iter()
            .map(|s| {
                Array2::from_shape_fn((5, 9), |(k, j)| {
                    if s.targets[k] == Some(j as u32) {
                        200.0
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        assert!(hybrid_loss(&logits, &b).unwrap().total < 1e-80);
    }

    #[test]
    fn pooled_mean_matches_per_position_oracle() {
        let b = batch();
        let logits: Vec<Array2<f64>> = (0..2)
            .map(|s| {
                Array2::from_shape_fn((5, 9), |(k, j)| {
                    ((s * 31 + k * 7 + j * 3) % 11) as f64 * 0.37 - 1.5
                })
            })
            .collect();
        // Explicit per-position summation.
        let mut total = 0.0;
        let mut n = 0;
        let mut per_mode = [(0.0, 0usize); 2];
        for (si, (l, s)) in logits.iter().zip(&b.sequences).enumerate() {
            for k in 0..5 {
                if let Some(t) = s.targets[k] {
                    let row: Vec<f64> = l.row(k).to_vec();
                    let z: f64 = row.iter().map(|x| x.exp()).sum();
                    let nll = -(row[t as usize].exp() / z).ln();
                    total += nll;
                    n += 1;
                    per_mode[si].0 += nll;
                    per_mode[si].1 += 1;
                }
            }
        }
        let got = hybrid_loss(&logits, &b).unwrap();
        assert!((got.total - total / n as f64).abs() < 1e-12);
        let weighted = (got.causal.unwrap() * per_mode[0].1 as f64
            + got.masked.unwrap() * per_mode[1].1 as f64)
            / n as f64;
        assert!((got.total - weighted).abs() < 1e-12);
        assert_eq!(got.causal_positions, 3);
        assert_eq!(got.masked_positions, 2);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let mut b = batch();
        for s in &mut b.sequences {
            s.targets.iter_mut().for_each(|t| *t = None);
        }
        let logits = vec![Array2::<f32>::zeros((5, 9)); 2];
        assert!(matches!(hybrid_loss(&logits, &b), Err(Error::Input(_))));
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits = Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f64 * 0.1);
        let (_, g) = cross_entropy_with_grad(&logits, &[Some(1), None, Some(4)], 0.5);
        assert!(g.row(1).iter().all(|&x| x == 0.0));
        assert!(g.row(0).sum().abs() < 1e-15);
        assert!(g[[2, 4]] < 0.0);
    }
}
