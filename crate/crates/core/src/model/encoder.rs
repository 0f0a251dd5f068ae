//! Single-layer attention encoder over the retained tokens, mean-pooled into a
//! linear classification head.
//!
//! ```text
//! X  = tokens[retained]                 (m x d)
//! A  = rowsoftmax(X W_Q (X W_K)^T / sqrt d)
//! Z  = X + A (X W_V)
//! H  = Z + relu(Z W_1) W_2
//! y  = mean_rows(H) W_out + b_out
//! ```
//!
//! Pruned rows never enter the computation, so they receive no gradient.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::params::ParamVector;
use crate::error::{Error, Result};

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub x: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub attn: Array2<f64>,
    pub z: Array2<f64>,
    pub pre_relu: Array2<f64>,
    pub hidden: Array2<f64>,
    pub pooled: Array1<f64>,
}

fn check_inputs(params: &ParamVector, tokens: ArrayView2<'_, f64>, retained: &[usize]) -> Result<()> {
    let cfg = params.config();
    if tokens.ncols() != cfg.token_dim {
        return Err(Error::InvalidArgument(format!(
            "token dim {} does not match encoder dim {}",
            tokens.ncols(),
            cfg.token_dim
        )));
    }
    if retained.is_empty() {
        return Err(Error::InvalidArgument("no retained tokens".into()));
    }
    if let Some(&bad) = retained.iter().find(|&&i| i >= tokens.nrows()) {
        return Err(Error::InvalidArgument(format!(
            "retained index {bad} out of range for {} tokens",
            tokens.nrows()
        )));
    }
    Ok(())
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
}

pub fn forward(
    params: &ParamVector,
    tokens: ArrayView2<'_, f64>,
    retained: &[usize],
) -> Result<(Vec<f64>, ForwardCache)> {
    check_inputs(params, tokens, retained)?;
    let scale = 1.0 / (params.config().token_dim as f64).sqrt();

    let x = tokens.select(Axis(0), retained);
    let q = x.dot(&params.w_q());
    let k = x.dot(&params.w_k());
    let v = x.dot(&params.w_v());
    let mut attn = q.dot(&k.t()) * scale;
    softmax_rows(&mut attn);
    let z = &x + &attn.dot(&v);
    let pre_relu = z.dot(&params.w_1());
    let act = pre_relu.mapv(|u| u.max(0.0));
    let hidden = &z + &act.dot(&params.w_2());
    let pooled = hidden.mean_axis(Axis(0)).expect("m >= 1");
    let logits = pooled.dot(&params.w_out()) + params.b_out();

    Ok((
        logits.to_vec(),
        ForwardCache {
            x,
            q,
            k,
            v,
            attn,
            z,
            pre_relu,
            hidden,
            pooled,
        },
    ))
}

/// `log(sum exp(logits)) - logits[label]`, and the softmax probabilities.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() + max - logits[label];
    (loss, exps.into_iter().map(|e| e / total).collect())
}

/// Accumulates `weight * d(loss)/d(params)` for one example into `grad`.
fn backward_into(params: &ParamVector, cache: &ForwardCache, dlogits: &Array1<f64>, grad: &mut ParamVector) {
    let m = cache.x.nrows() as f64;
    let scale = 1.0 / (params.config().token_dim as f64).sqrt();

    // Head.
    grad.b_out_mut().scaled_add(1.0, dlogits);
    {
        let outer = cache
            .pooled
            .view()
            .insert_axis(Axis(1))
            .dot(&dlogits.view().insert_axis(Axis(0)));
        grad.w_out_mut().scaled_add(1.0, &outer);
    }
    let dpooled = params.w_out().dot(dlogits);

    // Mean pool: every row receives dpooled / m.
    let dhidden = Array2::from_shape_fn(cache.hidden.raw_dim(), |(_, j)| dpooled[j] / m);

    // FFN with residual.
    let act = cache.pre_relu.mapv(|u| u.max(0.0));
    grad.w_2_mut().scaled_add(1.0, &act.t().dot(&dhidden));
    let mut dpre = dhidden.dot(&params.w_2().t());
    Zip::from(&mut dpre).and(&cache.pre_relu).for_each(|g, &u| {
        if u <= 0.0 {
            *g = 0.0
        }
    });
    grad.w_1_mut().scaled_add(1.0, &cache.z.t().dot(&dpre));
    let dz = &dhidden + &dpre.dot(&params.w_1().t());

    // Attention with residual.
    let dattn = dz.dot(&cache.v.t());
    let dv = cache.attn.t().dot(&dz);
    let mut dscores = &cache.attn * &dattn;
    let row_dots = dscores.sum_axis(Axis(1));
    Zip::from(dscores.rows_mut())
        .and(cache.attn.rows())
        .and(&row_dots)
        .for_each(|mut ds, a, &dot| ds.scaled_add(-dot, &a));
    dscores *= scale;
    let dq = dscores.dot(&cache.k);
    let dk = dscores.t().dot(&cache.q);

    let xt = cache.x.t();
    grad.w_q_mut().scaled_add(1.0, &xt.dot(&dq));
    grad.w_k_mut().scaled_add(1.0, &xt.dot(&dk));
    grad.w_v_mut().scaled_add(1.0, &xt.dot(&dv));
}

/// One training example: token matrix, label and the retained token indices.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub tokens: ArrayView2<'a, f64>,
    pub label: usize,
    pub retained: &'a [usize],
}

/// Mean softmax cross-entropy over `batch` and its gradient.
pub fn loss_and_grad(params: &ParamVector, batch: &[Example<'_>]) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let c = params.config().num_classes;
    let inv_b = 1.0 / batch.len() as f64;
    let mut grad = ParamVector::zeros(params.config());
    let mut loss = 0.0;
    for ex in batch {
        if ex.label >= c {
            return Err(Error::InvalidArgument(format!("label {} >= {c} classes", ex.label)));
        }
        let (logits, cache) = forward(params, ex.tokens, ex.retained)?;
        let (l, probs) = cross_entropy(&logits, ex.label);
        loss += l * inv_b;
        let mut dlogits = Array1::from(probs);
        dlogits[ex.label] -= 1.0;
        dlogits *= inv_b;
        backward_into(params, &cache, &dlogits, &mut grad);
    }
    Ok((loss, grad))
}

/// Mean loss only.
pub fn loss(params: &ParamVector, batch: &[Example<'_>]) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        let (logits, _) = forward(params, ex.tokens, ex.retained)?;
        total += cross_entropy(&logits, ex.label).0;
    }
    Ok(total / batch.len().max(1) as f64)
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}
