//! Forward/backward kernels over a flat parameter vector.
//!
//! Every layer is described by offsets into one `&[f64]`; gradients are
//! accumulated into a parallel `&mut [f64]` of the same length.

use serde::{Deserialize, Serialize};

/// Dense layer `y = W x + b`, `W` stored row-major `[n_out][n_in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearSpec {
    pub w: usize,
    pub b: usize,
    pub n_in: usize,
    pub n_out: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNormSpec {
    pub gain: usize,
    pub bias: usize,
    pub dim: usize,
}

pub const LN_EPS: f64 = 1e-5;

/// Hands out consecutive parameter ranges.
#[derive(Default)]
pub(crate) struct Allocator {
    pub len: usize,
    pub linears: Vec<LinearSpec>,
    pub norms: Vec<LayerNormSpec>,
    pub embeddings: Vec<(usize, usize)>,
}

impl Allocator {
    pub fn linear(&mut self, n_in: usize, n_out: usize) -> LinearSpec {
        let spec = LinearSpec {
            w: self.len,
            b: self.len + n_in * n_out,
            n_in,
            n_out,
        };
        self.len += n_in * n_out + n_out;
        self.linears.push(spec);
        spec
    }

    pub fn layer_norm(&mut self, dim: usize) -> LayerNormSpec {
        let spec = LayerNormSpec {
            gain: self.len,
            bias: self.len + dim,
            dim,
        };
        self.len += 2 * dim;
        self.norms.push(spec);
        spec
    }

    pub fn embedding(&mut self, n: usize) -> usize {
        let off = self.len;
        self.len += n;
        self.embeddings.push((off, n));
        off
    }
}

pub fn linear_forward(p: &[f64], l: &LinearSpec, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), l.n_in);
    debug_assert_eq!(y.len(), l.n_out);
    for (o, yo) in y.iter_mut().enumerate() {
        let row = &p[l.w + o * l.n_in..l.w + (o + 1) * l.n_in];
        *yo = p[l.b + o] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
    }
}

pub fn linear(p: &[f64], l: &LinearSpec, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; l.n_out];
    linear_forward(p, l, x, &mut y);
    y
}

/// Accumulates parameter gradients and, when `dx` is given, adds the input
/// gradient into it.
pub fn linear_backward(
    p: &[f64],
    g: &mut [f64],
    l: &LinearSpec,
    x: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
) {
    for (o, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        g[l.b + o] += d;
        let grow = &mut g[l.w + o * l.n_in..l.w + (o + 1) * l.n_in];
        for (gw, xi) in grow.iter_mut().zip(x) {
            *gw += d * xi;
        }
    }
    if let Some(dx) = dx {
        for (o, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &p[l.w + o * l.n_in..l.w + (o + 1) * l.n_in];
            for (dxi, w) in dx.iter_mut().zip(row) {
                *dxi += d * w;
            }
        }
    }
}

/// Normalized input and inverse standard deviation, kept for backward.
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: f64,
}

pub fn layer_norm_forward(p: &[f64], l: &LayerNormSpec, x: &[f64]) -> (Vec<f64>, LayerNormCache) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y = xhat
        .iter()
        .enumerate()
        .map(|(i, xh)| p[l.gain + i] * xh + p[l.bias + i])
        .collect();
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    p: &[f64],
    g: &mut [f64],
    l: &LayerNormSpec,
    cache: &LayerNormCache,
    dy: &[f64],
    dx: &mut [f64],
) {
    let n = dy.len() as f64;
    let mut dxhat = vec![0.0; dy.len()];
    for i in 0..dy.len() {
        g[l.gain + i] += dy[i] * cache.xhat[i];
        g[l.bias + i] += dy[i];
        dxhat[i] = dy[i] * p[l.gain + i];
    }
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dxhat
        .iter()
        .zip(&cache.xhat)
        .map(|(a, b)| a * b)
        .sum::<f64>()
        / n;
    for i in 0..dy.len() {
        dx[i] += cache.inv_std * (dxhat[i] - mean_d - cache.xhat[i] * mean_dx);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Multi-head self-attention over a short token sequence.
/// `q`, `k`, `v` are `[seq][dim]`; returns the concatenated head outputs and
/// the attention weights `[head][i][j]`.
pub fn attention_forward(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    heads: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let seq = q.len();
    let dim = q[0].len();
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![vec![0.0; dim]; seq];
    let mut weights = vec![vec![vec![0.0; seq]; seq]; heads];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        for i in 0..seq {
            let scores: Vec<f64> = (0..seq)
                .map(|j| {
                    q[i][r.clone()]
                        .iter()
                        .zip(&k[j][r.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..seq {
                let a = exps[j] / z;
                weights[h][i][j] = a;
                for d in r.clone() {
                    out[i][d] += a * v[j][d];
                }
            }
        }
    }
    (out, weights)
}

/// Backward of [`attention_forward`]; returns `(dq, dk, dv)`.
#[allow(clippy::type_complexity)]
pub fn attention_backward(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    weights: &[Vec<Vec<f64>>],
    dout: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let seq = q.len();
    let dim = q[0].len();
    let heads = weights.len();
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![vec![0.0; dim]; seq];
    let mut dk = vec![vec![0.0; dim]; seq];
    let mut dv = vec![vec![0.0; dim]; seq];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        for i in 0..seq {
            let a = &weights[h][i];
            let da: Vec<f64> = (0..seq)
                .map(|j| {
                    dout[i][r.clone()]
                        .iter()
                        .zip(&v[j][r.clone()])
                        .map(|(x, y)| x * y)
                        .sum()
                })
                .collect();
            for j in 0..seq {
                for d in r.clone() {
                    dv[j][d] += a[j] * dout[i][d];
                }
            }
            let s: f64 = (0..seq).map(|j| a[j] * da[j]).sum();
            for j in 0..seq {
                let ds = a[j] * (da[j] - s) * scale;
                if ds == 0.0 {
                    continue;
                }
                for d in r.clone() {
                    dq[i][d] += ds * k[j][d];
                    dk[j][d] += ds * q[i][d];
                }
            }
        }
    }
    (dq, dk, dv)
}
