//! Forward pass with activation caching and the matching reverse pass.

use ndarray::{s, Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::mask::{build_attention_mask, AttentionMaskSpec};
use super::ops::{
    dropout_mask, gelu, gelu_grad, layer_norm, layer_norm_backward, masked_softmax_inplace, Rotary,
};
use super::params::{alpha_index, Linear, ModelParameters, SublayerParams};
use super::Scalar;
use crate::error::{Error, Result};

/// Random stream used for dropout.
pub type ModelRng = ChaCha8Rng;

struct AttentionCache<F> {
    /// Rotated queries and keys, raw values, all `[seq x hidden]`.
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    drops: Vec<Option<Array2<F>>>,
}

struct SublayerCache<F> {
    n1: Array2<F>,
    inv1: Array1<F>,
    gate: Array2<F>,
    /// Value path after dropout, the left factor of the GEGLU product.
    value: Array2<F>,
    value_drop: Option<Array2<F>>,
    n2: Array2<F>,
    inv2: Array1<F>,
    attention: Option<AttentionCache<F>>,
}

/// Activations retained by [`forward_with_cache`] for [`backward`].
pub struct ForwardCache<F> {
    ids: Vec<u32>,
    sublayers: Vec<SublayerCache<F>>,
    /// Output of sublayer `j` (1-based) at index `j - 1`.
    layer_outputs: Vec<Array2<F>>,
    head_norm: Array2<F>,
    head_inv: Array1<F>,
}

struct Context<'a, F> {
    visible: &'a Array2<bool>,
    rotary: &'a Rotary<F>,
    n_heads: usize,
    head_dim: usize,
    hidden_dropout: f64,
    attention_dropout: f64,
}

fn affine<F: Scalar>(x: &Array2<F>, lin: &Linear<F>) -> Array2<F> {
    let mut y = x.dot(&lin.weight);
    y += &lin.bias;
    y
}

/// Accumulate `x^T dy` and the column sums of `dy`; returns `dy W^T`.
fn affine_backward<F: Scalar>(
    x: &Array2<F>,
    dy: &Array2<F>,
    lin: &Linear<F>,
    grad: &mut Linear<F>,
) -> Array2<F> {
    grad.weight += &x.t().dot(dy);
    grad.bias += &dy.sum_axis(Axis(0));
    dy.dot(&lin.weight.t())
}

fn sublayer_forward<F: Scalar>(
    params: &SublayerParams<F>,
    x: &Array2<F>,
    ctx: &Context<'_, F>,
    rng: &mut Option<&mut ModelRng>,
) -> (Array2<F>, SublayerCache<F>) {
    let t = x.nrows();
    let (n1, inv1) = layer_norm(x);
    let gate = affine(&n1, params.gate());
    let (value, attention) = match params {
        SublayerParams::Attention {
            query, key, value, ..
        } => {
            let mut q = affine(&n1, query);
            let mut k = affine(&n1, key);
            let v = affine(&n1, value);
            ctx.rotary.apply(&mut q, ctx.head_dim, false);
            ctx.rotary.apply(&mut k, ctx.head_dim, false);
            let scale = F::c(1.0 / (ctx.head_dim as f64).sqrt());
            let mut out = Array2::zeros((t, q.ncols()));
            let mut probs = Vec::with_capacity(ctx.n_heads);
            let mut drops = Vec::with_capacity(ctx.n_heads);
            for h in 0..ctx.n_heads {
                let cols = s![.., h * ctx.head_dim..(h + 1) * ctx.head_dim];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t());
                scores.mapv_inplace(|x| x * scale);
                masked_softmax_inplace(&mut scores.view_mut(), &ctx.visible.view());
                let drop = match rng.as_deref_mut() {
                    Some(r) if ctx.attention_dropout > 0.0 => {
                        Some(dropout_mask((t, t), ctx.attention_dropout, r))
                    }
                    _ => None,
                };
                let head_out = match &drop {
                    Some(m) => (&scores * m).dot(&v.slice(cols)),
                    None => scores.dot(&v.slice(cols)),
                };
                out.slice_mut(cols).assign(&head_out);
                probs.push(scores);
                drops.push(drop);
            }
            (
                out,
                Some(AttentionCache {
                    q,
                    k,
                    v,
                    probs,
                    drops,
                }),
            )
        }
        SublayerParams::FeedForward { value, .. } => (affine(&n1, value), None),
    };
    let value_drop = match rng.as_deref_mut() {
        Some(r) if ctx.hidden_dropout > 0.0 => {
            Some(dropout_mask(value.dim(), ctx.hidden_dropout, r))
        }
        _ => None,
    };
    let value = match &value_drop {
        Some(m) => value * m,
        None => value,
    };
    let mixed = &value * &gate.mapv(gelu);
    let (n2, inv2) = layer_norm(&mixed);
    let y = x + &affine(&n2, params_output(params));
    (
        y,
        SublayerCache {
            n1,
            inv1,
            gate,
            value,
            value_drop,
            n2,
            inv2,
            attention,
        },
    )
}

fn params_output<F>(p: &SublayerParams<F>) -> &Linear<F> {
    match p {
        SublayerParams::Attention { output, .. } | SublayerParams::FeedForward { output, .. } => {
            output
        }
    }
}

/// Backward through output projection, second norm and GEGLU combine.
/// Returns the gradients of the value path (before dropout) and of `n1`
/// through the gate.
fn gated_backward<F: Scalar>(
    cache: &SublayerCache<F>,
    dy: &Array2<F>,
    gate: &Linear<F>,
    output: &Linear<F>,
    g_gate: &mut Linear<F>,
    g_output: &mut Linear<F>,
) -> (Array2<F>, Array2<F>) {
    let dn2 = affine_backward(&cache.n2, dy, output, g_output);
    let dmixed = layer_norm_backward(&dn2, &cache.n2, &cache.inv2);
    let dvalue = &dmixed * &cache.gate.mapv(gelu);
    let mut dgate = &dmixed * &cache.value;
    dgate.zip_mut_with(&cache.gate, |d, &g| *d = *d * gelu_grad(g));
    let dvalue = match &cache.value_drop {
        Some(m) => dvalue * m,
        None => dvalue,
    };
    let dn1 = affine_backward(&cache.n1, &dgate, gate, g_gate);
    (dvalue, dn1)
}

fn sublayer_backward<F: Scalar>(
    params: &SublayerParams<F>,
    cache: &SublayerCache<F>,
    dy: &Array2<F>,
    ctx: &Context<'_, F>,
    grads: &mut SublayerParams<F>,
) -> Array2<F> {
    let dn1 = match (params, grads) {
        (
            SublayerParams::FeedForward {
                value,
                gate,
                output,
            },
            SublayerParams::FeedForward {
                value: gv,
                gate: gg,
                output: go,
            },
        ) => {
            let (dvalue, mut dn1) = gated_backward(cache, dy, gate, output, gg, go);
            dn1 += &affine_backward(&cache.n1, &dvalue, value, gv);
            dn1
        }
        (
            SublayerParams::Attention {
                query,
                key,
                value,
                gate,
                output,
            },
            SublayerParams::Attention {
                query: gq,
                key: gk,
                value: gv,
                gate: gg,
                output: go,
            },
        ) => {
            let (dvalue, mut dn1) = gated_backward(cache, dy, gate, output, gg, go);
            let ac = cache.attention.as_ref().expect("attention cache");
            let scale = F::c(1.0 / (ctx.head_dim as f64).sqrt());
            let mut dq = Array2::zeros(ac.q.dim());
            let mut dk = Array2::zeros(ac.k.dim());
            let mut dv = Array2::zeros(ac.v.dim());
            for h in 0..ctx.n_heads {
                let cols = s![.., h * ctx.head_dim..(h + 1) * ctx.head_dim];
                let dout = dvalue.slice(cols);
                let probs = &ac.probs[h];
                let (dprobs, used) = match &ac.drops[h] {
                    Some(m) => (dout.dot(&ac.v.slice(cols).t()) * m, probs * m),
                    None => (dout.dot(&ac.v.slice(cols).t()), probs.clone()),
                };
                dv.slice_mut(cols).assign(&used.t().dot(&dout));
                // softmax backward, scaled back onto the raw dot products
                let mut dscores = dprobs;
                for (mut drow, prow) in dscores.axis_iter_mut(Axis(0)).zip(probs.axis_iter(Axis(0)))
                {
                    let dot: F = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum();
                    ndarray::Zip::from(&mut drow)
                        .and(&prow)
                        .for_each(|d, &p| *d = p * (*d - dot) * scale);
                }
                dq.slice_mut(cols).assign(&dscores.dot(&ac.k.slice(cols)));
                dk.slice_mut(cols)
                    .assign(&dscores.t().dot(&ac.q.slice(cols)));
            }
            ctx.rotary.apply(&mut dq, ctx.head_dim, true);
            ctx.rotary.apply(&mut dk, ctx.head_dim, true);
            dn1 += &affine_backward(&cache.n1, &dq, query, gq);
            dn1 += &affine_backward(&cache.n1, &dk, key, gk);
            dn1 += &affine_backward(&cache.n1, &dv, value, gv);
            dn1
        }
        _ => unreachable!("gradient layout mirrors parameter layout"),
    };
    dy + &layer_norm_backward(&dn1, &cache.n1, &cache.inv1)
}

fn check_inputs<F: Scalar>(
    params: &ModelParameters<F>,
    ids: &[u32],
    mask: &AttentionMaskSpec,
) -> Result<()> {
    let cfg = &params.config;
    if ids.is_empty() {
        return Err(Error::input("empty input sequence"));
    }
    if ids.len() > cfg.max_seq_len {
        return Err(Error::input(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            ids.len(),
            cfg.max_seq_len
        )));
    }
    if mask.seq_len != ids.len() {
        return Err(Error::input(format!(
            "mask covers {} positions, input has {}",
            mask.seq_len,
            ids.len()
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
        return Err(Error::input(format!(
            "token id {bad} out of range for vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Logits `[seq_len x vocab]` plus the activations needed for [`backward`].
///
/// `pad_id` hides padding keys from every query. Dropout is applied only
/// when a random stream is supplied.
pub fn forward_with_cache<F: Scalar>(
    params: &ModelParameters<F>,
    ids: &[u32],
    mask: &AttentionMaskSpec,
    pad_id: Option<u32>,
    mut dropout: Option<&mut ModelRng>,
) -> Result<(Array2<F>, ForwardCache<F>)> {
    check_inputs(params, ids, mask)?;
    let cfg = &params.config;
    let pad_keys: Option<Vec<bool>> = pad_id.map(|p| ids.iter().map(|&i| i == p).collect());
    let visible = build_attention_mask(mask, pad_keys.as_deref())?;
    let rotary = Rotary::new(ids.len(), cfg.head_dim(), cfg.rope_base);
    let ctx = Context {
        visible: &visible,
        rotary: &rotary,
        n_heads: cfg.n_heads,
        head_dim: cfg.head_dim(),
        hidden_dropout: cfg.dropout_p,
        attention_dropout: cfg.attention_dropout_p,
    };

    let mut current = params.embedding.select(
        Axis(0),
        &ids.iter().map(|&i| i as usize).collect::<Vec<_>>(),
    );
    let n = cfg.n_sublayers();
    let mut sub_caches = Vec::with_capacity(n);
    let mut layer_outputs: Vec<Array2<F>> = Vec::with_capacity(n);
    for i in 1..=n {
        let (out, cache) = sublayer_forward(&params.sublayers[i - 1], &current, &ctx, &mut dropout);
        layer_outputs.push(out);
        sub_caches.push(cache);
        let mut combined = Array2::zeros(current.dim());
        for j in 1..=i {
            combined.scaled_add(params.alpha[alpha_index(i, j)], &layer_outputs[j - 1]);
        }
        current = combined;
    }
    let (head_norm, head_inv) = layer_norm(&current);
    let logits = head_norm.dot(&params.head_matrix().t());
    Ok((
        logits,
        ForwardCache {
            ids: ids.to_vec(),
            sublayers: sub_caches,
            layer_outputs,
            head_norm,
            head_inv,
        },
    ))
}

/// Logits `[seq_len x vocab]`.
pub fn forward<F: Scalar>(
    params: &ModelParameters<F>,
    ids: &[u32],
    mask: &AttentionMaskSpec,
    pad_id: Option<u32>,
    dropout: Option<&mut ModelRng>,
) -> Result<Array2<F>> {
    forward_with_cache(params, ids, mask, pad_id, dropout).map(|(logits, _)| logits)
}

/// Accumulate into `grads` the gradient of a scalar loss whose gradient with
/// respect to the logits is `dlogits`. The mask must match the forward call.
pub fn backward<F: Scalar>(
    params: &ModelParameters<F>,
    cache: &ForwardCache<F>,
    mask: &AttentionMaskSpec,
    pad_id: Option<u32>,
    dlogits: &Array2<F>,
    grads: &mut ModelParameters<F>,
) -> Result<()> {
    let cfg = &params.config;
    let t = cache.ids.len();
    if dlogits.dim() != (t, cfg.vocab_size) {
        return Err(Error::input(format!(
            "logit gradient has shape {:?}, expected ({t}, {})",
            dlogits.dim(),
            cfg.vocab_size
        )));
    }
    let pad_keys: Option<Vec<bool>> = pad_id.map(|p| cache.ids.iter().map(|&i| i == p).collect());
    let visible = build_attention_mask(mask, pad_keys.as_deref())?;
    let rotary = Rotary::new(t, cfg.head_dim(), cfg.rope_base);
    let ctx = Context {
        visible: &visible,
        rotary: &rotary,
        n_heads: cfg.n_heads,
        head_dim: cfg.head_dim(),
        hidden_dropout: cfg.dropout_p,
        attention_dropout: cfg.attention_dropout_p,
    };

    let head_grad = dlogits.t().dot(&cache.head_norm);
    let dnorm = dlogits.dot(params.head_matrix());
    match &mut grads.head {
        Some(h) => *h += &head_grad,
        None => grads.embedding += &head_grad,
    }

    let n = cfg.n_sublayers();
    let mut douts: Vec<Option<Array2<F>>> = (0..=n).map(|_| None).collect();
    douts[n] = Some(layer_norm_backward(
        &dnorm,
        &cache.head_norm,
        &cache.head_inv,
    ));
    let mut dlayers: Vec<Array2<F>> = (0..n)
        .map(|_| Array2::zeros((t, cfg.hidden_size)))
        .collect();
    for i in (1..=n).rev() {
        let d = douts[i]
            .take()
            .unwrap_or_else(|| Array2::zeros((t, cfg.hidden_size)));
        for j in 1..=i {
            let idx = alpha_index(i, j);
            grads.alpha[idx] += (&cache.layer_outputs[j - 1] * &d).sum();
            dlayers[j - 1].scaled_add(params.alpha[idx], &d);
        }
        let dl = std::mem::replace(&mut dlayers[i - 1], Array2::zeros((0, 0)));
        let dx = sublayer_backward(
            &params.sublayers[i - 1],
            &cache.sublayers[i - 1],
            &dl,
            &ctx,
            &mut grads.sublayers[i - 1],
        );
        match &mut douts[i - 1] {
            Some(acc) => *acc += &dx,
            slot => *slot = Some(dx),
        }
    }
    let d0 = douts[0].take().expect("embedding gradient");
    for (row, &id) in d0.axis_iter(Axis(0)).zip(&cache.ids) {
        let mut dst = grads.embedding.row_mut(id as usize);
        dst += &row;
    }
    Ok(())
}
