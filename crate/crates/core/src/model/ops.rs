//! Row-wise kernels used by the encoder: layer norm, GELU, multi-head attention.
//! Every kernel has a matching hand-written backward.

use crate::error::Result;
use crate::tensor::DenseTensor;

pub const LN_EPS: f64 = 1e-5;

// ── layer norm ─────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: DenseTensor,
    inv_std: Vec<f64>,
}

/// Normalizes each row to zero mean and unit (biased) variance, then applies
/// `γ ⊙ x̂ + β`.
pub fn layer_norm(x: &DenseTensor, gamma: &[f64], beta: &[f64]) -> Result<(DenseTensor, LayerNormCache)> {
    let h = x.cols();
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for row in xhat.data_mut().chunks_mut(h) {
        let mean = row.iter().sum::<f64>() / h as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * is);
        inv_std.push(is);
    }
    let mut y = xhat.clone();
    for row in y.data_mut().chunks_mut(h) {
        for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = *v * g + b;
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Returns `(dx, dγ, dβ)`.
pub fn layer_norm_backward(
    dy: &DenseTensor,
    cache: &LayerNormCache,
    gamma: &[f64],
) -> Result<(DenseTensor, Vec<f64>, Vec<f64>)> {
    let h = dy.cols();
    let mut dgamma = vec![0.0; h];
    let mut dbeta = vec![0.0; h];
    let mut dx = DenseTensor::zeros(dy.shape())?;
    let rows = dy
        .data()
        .chunks(h)
        .zip(cache.xhat.data().chunks(h))
        .zip(dx.data_mut().chunks_mut(h))
        .zip(&cache.inv_std);
    for (((dyr, xr), dxr), &is) in rows {
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for j in 0..h {
            dgamma[j] += dyr[j] * xr[j];
            dbeta[j] += dyr[j];
            let dxhat = dyr[j] * gamma[j];
            sum_d += dxhat;
            sum_dx += dxhat * xr[j];
        }
        let hf = h as f64;
        for j in 0..h {
            let dxhat = dyr[j] * gamma[j];
            dxr[j] = is / hf * (hf * dxhat - sum_d - xr[j] * sum_dx);
        }
    }
    Ok((dx, dgamma, dbeta))
}

// ── GELU (tanh form) ───────────────────────────────────────────────

const GELU_C: f64 = 0.044_715;

fn gelu_inner(x: f64) -> f64 {
    (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_C * x * x * x)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_inner(x).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = gelu_inner(x).tanh();
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}

// ── attention ──────────────────────────────────────────────────────

/// Softmax probabilities for every `(batch, head)` pair, each `seq × seq`.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    probs: Vec<Vec<f64>>,
}

/// Scaled dot-product attention over the sequence axis. `q`, `k`, `v` are
/// `(batch·seq) × hidden` with heads occupying contiguous column blocks.
pub fn attention(
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<(DenseTensor, AttentionCache)> {
    let hidden = q.cols();
    let dh = hidden / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = DenseTensor::zeros(&[batch * seq, hidden])?;
    let mut probs = Vec::with_capacity(batch * heads);
    for b in 0..batch {
        for h in 0..heads {
            let col = h * dh;
            let mut p = vec![0.0; seq * seq];
            for i in 0..seq {
                let qi = &q.data()[(b * seq + i) * hidden + col..][..dh];
                let row = &mut p[i * seq..(i + 1) * seq];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k.data()[(b * seq + j) * hidden + col..][..dh];
                    *s = scale * qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>();
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                row.iter_mut().for_each(|s| *s /= z);
            }
            for i in 0..seq {
                for j in 0..seq {
                    let pij = p[i * seq + j];
                    let vj = (b * seq + j) * hidden + col;
                    let ci = (b * seq + i) * hidden + col;
                    for d in 0..dh {
                        let val = pij * v.data()[vj + d];
                        ctx.data_mut()[ci + d] += val;
                    }
                }
            }
            probs.push(p);
        }
    }
    Ok((ctx, AttentionCache { probs }))
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    dctx: &DenseTensor,
    q: &DenseTensor,
    k: &DenseTensor,
    v: &DenseTensor,
    cache: &AttentionCache,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<(DenseTensor, DenseTensor, DenseTensor)> {
    let hidden = q.cols();
    let dh = hidden / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = DenseTensor::zeros(q.shape())?;
    let mut dk = DenseTensor::zeros(k.shape())?;
    let mut dv = DenseTensor::zeros(v.shape())?;
    let at = |b: usize, i: usize, col: usize| (b * seq + i) * hidden + col;
    for b in 0..batch {
        for h in 0..heads {
            let col = h * dh;
            let p = &cache.probs[b * heads + h];
            // dP = dC · Vᵀ, dV = Pᵀ · dC
            let mut dp = vec![0.0; seq * seq];
            for i in 0..seq {
                for j in 0..seq {
                    let mut s = 0.0;
                    for d in 0..dh {
                        s += dctx.data()[at(b, i, col) + d] * v.data()[at(b, j, col) + d];
                    }
                    dp[i * seq + j] = s;
                    let pij = p[i * seq + j];
                    for d in 0..dh {
                        dv.data_mut()[at(b, j, col) + d] += pij * dctx.data()[at(b, i, col) + d];
                    }
                }
            }
            // softmax backward: dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for i in 0..seq {
                let row = i * seq..(i + 1) * seq;
                let dot: f64 = p[row.clone()].iter().zip(&dp[row.clone()]).map(|(a, b)| a * b).sum();
                for j in 0..seq {
                    let ds = p[i * seq + j] * (dp[i * seq + j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for d in 0..dh {
                        let kd = k.data()[at(b, j, col) + d];
                        let qd = q.data()[at(b, i, col) + d];
                        dq.data_mut()[at(b, i, col) + d] += ds * kd;
                        dk.data_mut()[at(b, j, col) + d] += ds * qd;
                    }
                }
            }
        }
    }
    Ok((dq, dk, dv))
}
