use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::Rng;

use super::Scalar;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-7;

/// Row-wise normalization without learned scale or shift.
/// Returns the normalized rows and each row's `1/sqrt(var + eps)`.
pub(crate) fn layer_norm<F: Scalar>(x: &Array2<F>) -> (Array2<F>, Array1<F>) {
    let n = F::c(x.ncols() as f64);
    let eps = F::c(LAYER_NORM_EPS);
    let mut y = x.clone();
    let mut inv = Array1::zeros(x.nrows());
    for (mut row, s) in y.axis_iter_mut(Axis(0)).zip(inv.iter_mut()) {
        let mean = row.iter().copied().sum::<F>() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / n;
        let inv_std = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * inv_std);
        *s = inv_std;
    }
    (y, inv)
}

/// Gradient through [`layer_norm`] given its outputs.
pub(crate) fn layer_norm_backward<F: Scalar>(
    dy: &Array2<F>,
    y: &Array2<F>,
    inv: &Array1<F>,
) -> Array2<F> {
    let n = F::c(y.ncols() as f64);
    let mut dx = dy.clone();
    for ((mut dxr, yr), &s) in dx
        .axis_iter_mut(Axis(0))
        .zip(y.axis_iter(Axis(0)))
        .zip(inv.iter())
    {
        let mean_dy = dxr.iter().copied().sum::<F>() / n;
        let mean_dyy = dxr.iter().zip(yr.iter()).map(|(&a, &b)| a * b).sum::<F>() / n;
        Zip::from(&mut dxr).and(&yr).for_each(|d, &yv| {
            *d = s * (*d - mean_dy - yv * mean_dyy);
        });
    }
    dx
}

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let half = F::c(0.5);
    half * x * (F::one() + (x * F::c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub(crate) fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = F::c(0.5);
    let cdf = half * (F::one() + (x * F::c(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * F::c(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Rotary angle tables, `[seq_len x head_dim/2]`.
pub(crate) struct Rotary<F> {
    cos: Array2<F>,
    sin: Array2<F>,
}

impl<F: Scalar> Rotary<F> {
    pub(crate) fn new(seq_len: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let angle =
            |pos: usize, i: usize| pos as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
        Rotary {
            cos: Array2::from_shape_fn((seq_len, half), |(p, i)| F::c(angle(p, i).cos())),
            sin: Array2::from_shape_fn((seq_len, half), |(p, i)| F::c(angle(p, i).sin())),
        }
    }

    /// Rotate every head of `x` (`[seq x n_heads*head_dim]`) in place.
    /// Pairs dimension `i` with `i + head_dim/2` inside each head.
    pub(crate) fn apply(&self, x: &mut Array2<F>, head_dim: usize, inverse: bool) {
        let half = head_dim / 2;
        let heads = x.ncols() / head_dim;
        for (p, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
            for h in 0..heads {
                let base = h * head_dim;
                for i in 0..half {
                    let c = self.cos[[p, i]];
                    let s = if inverse {
                        -self.sin[[p, i]]
                    } else {
                        self.sin[[p, i]]
                    };
                    let a = row[base + i];
                    let b = row[base + i + half];
                    row[base + i] = a * c - b * s;
                    row[base + i + half] = b * c + a * s;
                }
            }
        }
    }
}

/// Softmax over visible entries of each row; invisible entries become 0.
/// A row with no visible entry is all zeros.
pub(crate) fn masked_softmax_inplace<F: Scalar>(
    scores: &mut ArrayViewMut2<F>,
    visible: &ArrayView2<bool>,
) {
    for (mut row, vis) in scores
        .axis_iter_mut(Axis(0))
        .zip(visible.axis_iter(Axis(0)))
    {
        let mut max = F::neg_infinity();
        for (&s, &v) in row.iter().zip(vis.iter()) {
            if v && s > max {
                max = s;
            }
        }
        if max == F::neg_infinity() {
            row.fill(F::zero());
            continue;
        }
        let mut sum = F::zero();
        for (s, &v) in row.iter_mut().zip(vis.iter()) {
            *s = if v { (*s - max).exp() } else { F::zero() };
            sum += *s;
        }
        row.mapv_inplace(|s| s / sum);
    }
}

/// Inverted-dropout multiplier mask: 0 with probability `p`, else `1/(1-p)`.
pub(crate) fn dropout_mask<F: Scalar, R: Rng + ?Sized>(
    shape: (usize, usize),
    p: f64,
    rng: &mut R,
) -> Array2<F> {
    let keep = F::c(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < p {
            F::zero()
        } else {
            keep
        }
    })
}

/// Log-softmax of a single row of logits divided by a temperature.
pub fn log_softmax_row<F: Scalar>(row: &[F], temperature: f64) -> Vec<f64> {
    let t = temperature;
    let scaled: Vec<f64> = row
        .iter()
        .map(|x| x.to_f64().unwrap_or(f64::NAN) / t)
        .collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    scaled.into_iter().map(|x| x - lse).collect()
}
