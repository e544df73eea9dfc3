use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{alpha_count, ModelConfig, Scalar};
use crate::error::{Error, Result};

/// Affine map `x W + b` with `W` stored `[in x out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    fn init<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            weight: truncated_normal((input, output), std, rng),
            bias: Array1::zeros(output),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SublayerParams<F> {
    Attention {
        query: Linear<F>,
        key: Linear<F>,
        value: Linear<F>,
        gate: Linear<F>,
        output: Linear<F>,
    },
    FeedForward {
        value: Linear<F>,
        gate: Linear<F>,
        output: Linear<F>,
    },
}

impl<F: Scalar> SublayerParams<F> {
    pub fn gate(&self) -> &Linear<F> {
        match self {
            SublayerParams::Attention { gate, .. } | SublayerParams::FeedForward { gate, .. } => {
                gate
            }
        }
    }

    pub fn gate_mut(&mut self) -> &mut Linear<F> {
        match self {
            SublayerParams::Attention { gate, .. } | SublayerParams::FeedForward { gate, .. } => {
                gate
            }
        }
    }

    fn linears(&self) -> Vec<(&'static str, &Linear<F>)> {
        match self {
            SublayerParams::Attention {
                query,
                key,
                value,
                gate,
                output,
            } => vec![
                ("query", query),
                ("key", key),
                ("value", value),
                ("gate", gate),
                ("output", output),
            ],
            SublayerParams::FeedForward {
                value,
                gate,
                output,
            } => {
                vec![("value", value), ("gate", gate), ("output", output)]
            }
        }
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear<F>> {
        match self {
            SublayerParams::Attention {
                query,
                key,
                value,
                gate,
                output,
            } => vec![query, key, value, gate, output],
            SublayerParams::FeedForward {
                value,
                gate,
                output,
            } => vec![value, gate, output],
        }
    }
}

/// What a tensor is, for optimizer rules such as weight-decay exclusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Embedding,
    Weight,
    Bias,
    LayerWeights,
    Head,
}

impl TensorRole {
    pub fn decays(self) -> bool {
        matches!(
            self,
            TensorRole::Embedding | TensorRole::Weight | TensorRole::Head
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<F> {
    pub config: ModelConfig,
    /// `[vocab x hidden]`
    pub embedding: Array2<F>,
    pub sublayers: Vec<SublayerParams<F>>,
    /// Lower-triangular layer-combination scalars, packed row by row:
    /// row `i` (1-based) holds `alpha[i][1..=i]`.
    pub alpha: Array1<F>,
    /// `[vocab x hidden]`, absent when tied to the embedding.
    pub head: Option<Array2<F>>,
}

/// Packed index of `alpha[i][j]`, 1-based, `j <= i`.
#[inline]
pub fn alpha_index(i: usize, j: usize) -> usize {
    debug_assert!(1 <= j && j <= i);
    (i - 1) * i / 2 + (j - 1)
}

fn truncated_normal<F: Scalar, R: Rng + ?Sized>(
    shape: (usize, usize),
    std: f64,
    rng: &mut R,
) -> Array2<F> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn(shape, || loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            break F::c(x);
        }
    })
}

impl<F: Scalar> ModelParameters<F> {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let h = config.hidden_size;
        let f = config.ff_intermediate_size;
        let v = config.vocab_size;
        let sublayers = (1..=config.n_sublayers())
            .map(|i| {
                if i % 2 == 1 {
                    SublayerParams::Attention {
                        query: Linear::zeros(h, h),
                        key: Linear::zeros(h, h),
                        value: Linear::zeros(h, h),
                        gate: Linear::zeros(h, h),
                        output: Linear::zeros(h, h),
                    }
                } else {
                    SublayerParams::FeedForward {
                        value: Linear::zeros(h, f),
                        gate: Linear::zeros(h, f),
                        output: Linear::zeros(f, h),
                    }
                }
            })
            .collect();
        ModelParameters {
            config: config.clone(),
            embedding: Array2::zeros((v, h)),
            sublayers,
            alpha: Array1::zeros(alpha_count(config.n_sublayers())),
            head: (!config.tie_embeddings).then(|| Array2::zeros((v, h))),
        }
    }

    /// Truncated-normal (std 0.02) projections, output projections scaled by
    /// `1/sqrt(2 n_layers)`, zero biases, identity layer weighting.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let std = 0.02;
        let out_std = std / (2.0 * config.n_layers as f64).sqrt();
        let h = config.hidden_size;
        let f = config.ff_intermediate_size;
        let v = config.vocab_size;
        let embedding = truncated_normal((v, h), std, rng);
        let sublayers = (1..=config.n_sublayers())
            .map(|i| {
                if i % 2 == 1 {
                    SublayerParams::Attention {
                        query: Linear::init(h, h, std, rng),
                        key: Linear::init(h, h, std, rng),
                        value: Linear::init(h, h, std, rng),
                        gate: Linear::init(h, h, std, rng),
                        output: Linear::init(h, h, out_std, rng),
                    }
                } else {
                    SublayerParams::FeedForward {
                        value: Linear::init(h, f, std, rng),
                        gate: Linear::init(h, f, std, rng),
                        output: Linear::init(f, h, out_std, rng),
                    }
                }
            })
            .collect();
        let head = (!config.tie_embeddings).then(|| truncated_normal((v, h), std, rng));
        let mut p = ModelParameters {
            config: config.clone(),
            embedding,
            sublayers,
            alpha: Array1::zeros(alpha_count(config.n_sublayers())),
            head,
        };
        p.set_identity_alpha();
        Ok(p)
    }

    pub fn set_identity_alpha(&mut self) {
        self.alpha.fill(F::zero());
        for i in 1..=self.config.n_sublayers() {
            self.alpha[alpha_index(i, i)] = F::one();
        }
    }

    pub fn alpha(&self, i: usize, j: usize) -> F {
        self.alpha[alpha_index(i, j)]
    }

    /// Output projection matrix of the head, `[vocab x hidden]`.
    pub fn head_matrix(&self) -> &Array2<F> {
        self.head.as_ref().unwrap_or(&self.embedding)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Named tensors in a fixed order, flattened row-major.
    pub fn tensors(&self) -> Vec<(String, TensorRole, Vec<usize>, &[F])> {
        let mut out: Vec<(String, TensorRole, Vec<usize>, &[F])> = Vec::new();
        out.push((
            "embedding".into(),
            TensorRole::Embedding,
            self.embedding.shape().to_vec(),
            self.embedding.as_slice().expect("standard layout"),
        ));
        for (i, sub) in self.sublayers.iter().enumerate() {
            let kind = if matches!(sub, SublayerParams::Attention { .. }) {
                "attention"
            } else {
                "feed_forward"
            };
            for (name, lin) in sub.linears() {
                out.push((
                    format!("sublayers.{}.{kind}.{name}.weight", i + 1),
                    TensorRole::Weight,
                    lin.weight.shape().to_vec(),
                    lin.weight.as_slice().expect("standard layout"),
                ));
                out.push((
                    format!("sublayers.{}.{kind}.{name}.bias", i + 1),
                    TensorRole::Bias,
                    lin.bias.shape().to_vec(),
                    lin.bias.as_slice().expect("standard layout"),
                ));
            }
        }
        out.push((
            "alpha".into(),
            TensorRole::LayerWeights,
            self.alpha.shape().to_vec(),
            self.alpha.as_slice().expect("standard layout"),
        ));
        if let Some(h) = &self.head {
            out.push((
                "head".into(),
                TensorRole::Head,
                h.shape().to_vec(),
                h.as_slice().expect("standard layout"),
            ));
        }
        out
    }

    /// Mutable views in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = Vec::new();
        out.push(self.embedding.as_slice_mut().expect("standard layout"));
        for sub in &mut self.sublayers {
            for lin in sub.linears_mut() {
                out.push(lin.weight.as_slice_mut().expect("standard layout"));
                out.push(lin.bias.as_slice_mut().expect("standard layout"));
            }
        }
        out.push(self.alpha.as_slice_mut().expect("standard layout"));
        if let Some(h) = &mut self.head {
            out.push(h.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.3.len()).sum()
    }

    /// `self += other`, elementwise over every tensor.
    pub fn add_assign(&mut self, other: &Self) {
        let src = other.tensors();
        for (dst, (_, _, _, s)) in self.tensors_mut().into_iter().zip(src) {
            for (d, &x) in dst.iter_mut().zip(s) {
                *d += x;
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for t in self.tensors_mut() {
            for x in t {
                *x *= factor;
            }
        }
    }

    /// Global L2 norm over every tensor, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.3.iter())
            .map(|x| {
                let v = x.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.3.iter().all(|x| x.is_finite()))
    }

    /// Element-type conversion, e.g. `f32` weights to `f64` for gradient checks.
    pub fn cast<G: Scalar>(&self) -> ModelParameters<G> {
        let mut out = ModelParameters::<G>::zeros(&self.config);
        let src = self.tensors();
        for (dst, (_, _, _, s)) in out.tensors_mut().into_iter().zip(src) {
            for (d, &x) in dst.iter_mut().zip(s) {
                *d = G::c(x.to_f64().unwrap_or(f64::NAN));
            }
        }
        out
    }

    /// Overwrite tensor `index` (in [`Self::tensors`] order) from a flat slice.
    pub fn load_tensor(&mut self, index: usize, data: &[F]) -> Result<()> {
        let mut views = self.tensors_mut();
        let n = views.len();
        let dst = views.get_mut(index).ok_or_else(|| {
            Error::input(format!("tensor index {index} out of range ({n} tensors)"))
        })?;
        if dst.len() != data.len() {
            return Err(Error::input(format!(
                "tensor {index} expects {} values, got {}",
                dst.len(),
                data.len()
            )));
        }
        dst.copy_from_slice(data);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::count_parameters;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(tied: bool) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            hidden_size: 8,
            ff_intermediate_size: 12,
            n_heads: 2,
            vocab_size: 16,
            dropout_p: 0.0,
            attention_dropout_p: 0.0,
            max_seq_len: 8,
            tie_embeddings: tied,
            rope_base: 10_000.0,
        }
    }

    #[test]
    fn count_matches_enumerated_tensors() {
        for tied in [true, false] {
            let cfg = tiny(tied);
            let p = ModelParameters::<f32>::zeros(&cfg);
            // Independent sum over the concrete tensors.
            let enumerated: usize = p
                .tensors()
                .iter()
                .map(|t| t.2.iter().product::<usize>())
                .sum();
            assert_eq!(enumerated, count_parameters(&cfg));
            assert_eq!(p.num_parameters(), enumerated);
        }
        // untied tiny: 16*8 + attention 5*(64+8) + ff 2*(96+12) + (96+8) + alpha 3 + head 128
        assert_eq!(
            count_parameters(&tiny(false)),
            128 + 360 + 216 + 104 + 3 + 128
        );
    }

    #[test]
    fn init_identity_alpha_and_lower_triangle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = tiny(true);
        cfg.n_layers = 2;
        let p = ModelParameters::<f32>::init(&cfg, &mut rng).unwrap();
        assert_eq!(p.alpha.len(), 10);
        for i in 1..=4 {
            for j in 1..=i {
                assert_eq!(p.alpha(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        assert!(p.embedding.iter().all(|x| x.abs() <= 0.04));
        assert!(p
            .sublayers
            .iter()
            .all(|s| s.gate().bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn tensor_views_line_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ModelParameters::<f64>::init(&tiny(false), &mut rng).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|t| t.0).collect();
        let lens: Vec<usize> = p.tensors().iter().map(|t| t.3.len()).collect();
        assert_eq!(
            p.tensors_mut()
                .into_iter()
                .map(|t| t.len())
                .collect::<Vec<_>>(),
            lens
        );
        assert_eq!(names.first().unwrap(), "embedding");
        assert_eq!(names.last().unwrap(), "head");
        assert!(names
            .iter()
            .any(|n| n == "sublayers.2.feed_forward.gate.weight"));
        let q = p.cast::<f32>().cast::<f64>();
        assert!((q.global_norm() - p.global_norm()).abs() < 1e-6);
    }
}
