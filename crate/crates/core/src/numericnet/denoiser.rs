//! The conditional pose denoiser and its exact backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{
    attention_backward, attention_forward, gelu, gelu_grad, layer_norm_backward,
    layer_norm_forward, linear, linear_backward, Allocator, LayerNormCache, LayerNormSpec,
    LinearSpec,
};
use super::{loss_and_grad, snap_to_f32, Architecture, LossKind, TrainConfig};
use crate::error::{Error, Result};
use crate::geometry::PoseVector;
use crate::par;

pub const POSE_DIM: usize = 7;
const FF_MULT: usize = 2;
const SEQ: usize = 3;
/// Batch elements per gradient shard. Fixed so the reduction order does not
/// depend on the thread count.
const SHARD: usize = 8;

/// Everything that determines the parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub architecture: Architecture,
    pub layers: usize,
    pub hidden_dim: usize,
    pub d_psi: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
}

impl NetShape {
    pub fn from_config(cfg: &TrainConfig, cond_dim: usize) -> Self {
        NetShape {
            architecture: cfg.architecture,
            layers: cfg.layers,
            hidden_dim: cfg.hidden_dim,
            d_psi: cfg.d_psi,
            heads: cfg.heads,
            time_dim: cfg.time_dim,
            cond_dim,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNormSpec,
    q: LinearSpec,
    k: LinearSpec,
    v: LinearSpec,
    o: LinearSpec,
    ln2: LayerNormSpec,
    ff1: LinearSpec,
    ff2: LinearSpec,
}

#[derive(Clone, Debug)]
enum Body {
    Transformer {
        pose_in: LinearSpec,
        time_in: LinearSpec,
        cond_in: LinearSpec,
        pos: usize,
        blocks: Vec<Block>,
        ln_f: LayerNormSpec,
    },
    Mlp {
        hidden: Vec<LinearSpec>,
    },
}

#[derive(Clone, Debug)]
struct Layout {
    psi: LinearSpec,
    body: Body,
    head: LinearSpec,
    len: usize,
}

fn build_layout(shape: &NetShape) -> (Layout, Allocator) {
    let mut a = Allocator::default();
    let h = shape.hidden_dim;
    let psi = a.linear(shape.cond_dim, shape.d_psi);
    let body = match shape.architecture {
        Architecture::Transformer => {
            let pose_in = a.linear(POSE_DIM, h);
            let time_in = a.linear(shape.time_dim, h);
            let cond_in = a.linear(shape.d_psi, h);
            let pos = a.embedding(SEQ * h);
            let blocks = (0..shape.layers)
                .map(|_| Block {
                    ln1: a.layer_norm(h),
                    q: a.linear(h, h),
                    k: a.linear(h, h),
                    v: a.linear(h, h),
                    o: a.linear(h, h),
                    ln2: a.layer_norm(h),
                    ff1: a.linear(h, FF_MULT * h),
                    ff2: a.linear(FF_MULT * h, h),
                })
                .collect();
            let ln_f = a.layer_norm(h);
            Body::Transformer {
                pose_in,
                time_in,
                cond_in,
                pos,
                blocks,
                ln_f,
            }
        }
        Architecture::Mlp => {
            let mut n_in = POSE_DIM + shape.time_dim + shape.d_psi;
            let hidden = (0..shape.layers)
                .map(|_| {
                    let l = a.linear(n_in, h);
                    n_in = h;
                    l
                })
                .collect();
            Body::Mlp { hidden }
        }
    };
    let head = a.linear(h, POSE_DIM);
    (
        Layout {
            psi,
            body,
            head,
            len: a.len,
        },
        a,
    )
}

/// Sinusoidal encoding of the timestep: `sin(t f_i)` then `cos(t f_i)` with
/// `f_i = 10000^(-i / (width/2))`.
pub fn time_embedding(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Trainable weights of the denoiser.
#[derive(Clone, Debug)]
pub struct DenoiserParams {
    pub shape: NetShape,
    pub values: Vec<f64>,
    layout: Layout,
}

impl PartialEq for DenoiserParams {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.values == other.values
    }
}

/// Gradient with the same layout as [`DenoiserParams::values`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

/// One training example for [`denoiser_backward`].
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub x: PoseVector,
    pub t: usize,
    pub cond: &'a [f64],
    pub dropout_seed: u64,
}

/// Anything that maps `(x_t, t, condition)` to a 7-vector. The sampler only
/// needs this.
pub trait Denoiser: Sync {
    fn predict(&self, x: &PoseVector, t: usize, cond: &[f64]) -> Result<PoseVector>;
}

impl DenoiserParams {
    /// Random initialization: weights `N(0, 1/fan_in)`, zero biases, unit
    /// layer-norm gains, positional embeddings `N(0, 0.02^2)`.
    pub fn init(shape: NetShape, seed: u64) -> Result<Self> {
        validate_shape(&shape)?;
        let (layout, alloc) = build_layout(&shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; layout.len];
        for l in &alloc.linears {
            let dist = Normal::new(0.0, 1.0 / (l.n_in as f64).sqrt()).unwrap();
            for v in &mut values[l.w..l.w + l.n_in * l.n_out] {
                *v = dist.sample(&mut rng);
            }
        }
        for n in &alloc.norms {
            for v in &mut values[n.gain..n.gain + n.dim] {
                *v = 1.0;
            }
        }
        let emb = Normal::new(0.0, 0.02).unwrap();
        for &(off, n) in &alloc.embeddings {
            for v in &mut values[off..off + n] {
                *v = emb.sample(&mut rng);
            }
        }
        snap_to_f32(&mut values);
        Ok(DenoiserParams {
            shape,
            values,
            layout,
        })
    }

    pub fn from_values(shape: NetShape, values: Vec<f64>) -> Result<Self> {
        validate_shape(&shape)?;
        let (layout, _) = build_layout(&shape);
        if values.len() != layout.len {
            return Err(Error::data(format!(
                "parameter count {} does not match shape ({} expected)",
                values.len(),
                layout.len
            )));
        }
        Ok(DenoiserParams {
            shape,
            values,
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Offsets of the output head `(weights, bias)`.
    pub fn head_ranges(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let h = &self.layout.head;
        (h.w..h.w + h.n_in * h.n_out, h.b..h.b + h.n_out)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            values: vec![0.0; self.values.len()],
        }
    }

    fn forward_cached(
        &self,
        x: &PoseVector,
        t: usize,
        cond: &[f64],
        dropout: Option<(f64, u64)>,
    ) -> Result<([f64; POSE_DIM], Cache)> {
        if cond.len() != self.shape.cond_dim {
            return Err(Error::config(format!(
                "condition has dimension {}, network expects {}",
                cond.len(),
                self.shape.cond_dim
            )));
        }
        let p = &self.values;
        let l = &self.layout;
        let temb = time_embedding(t, self.shape.time_dim);
        let psi_out = linear(p, &l.psi, cond);
        let (head_in, body) = match &l.body {
            Body::Mlp { hidden } => {
                let mut input = Vec::with_capacity(hidden[0].n_in);
                input.extend_from_slice(&x.0);
                input.extend_from_slice(&temb);
                input.extend_from_slice(&psi_out);
                let mut rng = dropout.map(|(_, s)| ChaCha8Rng::seed_from_u64(s));
                let mut pre = Vec::with_capacity(hidden.len());
                let mut post: Vec<Vec<f64>> = Vec::with_capacity(hidden.len());
                let mut masks = Vec::with_capacity(hidden.len());
                for (i, lin) in hidden.iter().enumerate() {
                    let z_in = if i == 0 { &input } else { &post[i - 1] };
                    let a = linear(p, lin, z_in);
                    let mut z: Vec<f64> = a.iter().map(|v| gelu(*v)).collect();
                    let mask = match (&mut rng, dropout) {
                        (Some(r), Some((prob, _))) if prob > 0.0 => {
                            let m = dropout_mask(r, z.len(), prob);
                            z.iter_mut().zip(&m).for_each(|(v, m)| *v *= m);
                            Some(m)
                        }
                        _ => None,
                    };
                    if z.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFiniteActivation { layer: i });
                    }
                    pre.push(a);
                    post.push(z);
                    masks.push(mask);
                }
                (
                    post.last().cloned().unwrap_or_default(),
                    BodyCache::Mlp {
                        input,
                        pre,
                        post,
                        masks,
                    },
                )
            }
            Body::Transformer {
                pose_in,
                time_in,
                cond_in,
                pos,
                blocks,
                ln_f,
            } => {
                let h = self.shape.hidden_dim;
                let mut xs: Vec<Vec<f64>> = vec![
                    linear(p, pose_in, &x.0),
                    linear(p, time_in, &temb),
                    linear(p, cond_in, &psi_out),
                ];
                for (s, tok) in xs.iter_mut().enumerate() {
                    for (d, v) in tok.iter_mut().enumerate() {
                        *v += p[pos + s * h + d];
                    }
                }
                let mut caches = Vec::with_capacity(blocks.len());
                for (bi, b) in blocks.iter().enumerate() {
                    let (next, c) = block_forward(p, b, &xs, self.shape.heads);
                    if next.iter().flatten().any(|v| !v.is_finite()) {
                        return Err(Error::NonFiniteActivation { layer: bi });
                    }
                    caches.push(c);
                    xs = next;
                }
                let (z, lnf) = layer_norm_forward(p, ln_f, &xs[0]);
                (
                    z,
                    BodyCache::Transformer {
                        blocks: caches,
                        lnf,
                    },
                )
            }
        };
        let out_vec = linear(p, &l.head, &head_in);
        if out_vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation {
                layer: self.shape.layers,
            });
        }
        let mut out = [0.0; POSE_DIM];
        out.copy_from_slice(&out_vec);
        Ok((
            out,
            Cache {
                pose: x.0.to_vec(),
                psi_in: cond.to_vec(),
                psi_out,
                temb,
                body,
                head_in,
            },
        ))
    }

    fn backward_cached(&self, cache: &Cache, dout: &[f64], g: &mut [f64]) {
        let p = &self.values;
        let l = &self.layout;
        let mut dhead_in = vec![0.0; l.head.n_in];
        linear_backward(p, g, &l.head, &cache.head_in, dout, Some(&mut dhead_in));
        let mut dpsi_out = vec![0.0; self.shape.d_psi];
        match (&l.body, &cache.body) {
            (
                Body::Mlp { hidden },
                BodyCache::Mlp {
                    input,
                    pre,
                    post,
                    masks,
                },
            ) => {
                let mut dz = dhead_in;
                for i in (0..hidden.len()).rev() {
                    let da: Vec<f64> = dz
                        .iter()
                        .enumerate()
                        .map(|(j, d)| {
                            let m = masks[i].as_ref().map_or(1.0, |m| m[j]);
                            d * m * gelu_grad(pre[i][j])
                        })
                        .collect();
                    let z_in = if i == 0 { input } else { &post[i - 1] };
                    let mut dz_in = vec![0.0; hidden[i].n_in];
                    linear_backward(p, g, &hidden[i], z_in, &da, Some(&mut dz_in));
                    dz = dz_in;
                }
                let off = POSE_DIM + self.shape.time_dim;
                dpsi_out.copy_from_slice(&dz[off..off + self.shape.d_psi]);
            }
            (
                Body::Transformer {
                    pose_in,
                    time_in,
                    cond_in,
                    pos,
                    blocks,
                    ln_f,
                },
                BodyCache::Transformer { blocks: bc, lnf },
            ) => {
                let h = self.shape.hidden_dim;
                let mut dxs = vec![vec![0.0; h]; SEQ];
                layer_norm_backward(p, g, ln_f, lnf, &dhead_in, &mut dxs[0]);
                for (b, c) in blocks.iter().zip(bc).rev() {
                    dxs = block_backward(p, g, b, c, &dxs);
                }
                for s in 0..SEQ {
                    for d in 0..h {
                        g[pos + s * h + d] += dxs[s][d];
                    }
                }
                linear_backward(p, g, pose_in, &cache.pose, &dxs[0], None);
                linear_backward(p, g, time_in, &cache.temb, &dxs[1], None);
                linear_backward(p, g, cond_in, &cache.psi_out, &dxs[2], Some(&mut dpsi_out));
            }
            _ => unreachable!("cache built by the same layout"),
        }
        linear_backward(p, g, &l.psi, &cache.psi_in, &dpsi_out, None);
    }
}

fn validate_shape(shape: &NetShape) -> Result<()> {
    if shape.layers == 0
        || shape.hidden_dim == 0
        || shape.d_psi == 0
        || shape.time_dim == 0
        || shape.cond_dim == 0
        || shape.heads == 0
    {
        return Err(Error::config("network dimensions must be > 0"));
    }
    if shape.architecture == Architecture::Transformer && !shape.hidden_dim.is_multiple_of(shape.heads) {
        return Err(Error::config("hidden_dim must be divisible by heads"));
    }
    Ok(())
}

pub(crate) fn dropout_mask<R: Rng>(rng: &mut R, n: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

struct Cache {
    pose: Vec<f64>,
    psi_in: Vec<f64>,
    psi_out: Vec<f64>,
    temb: Vec<f64>,
    body: BodyCache,
    head_in: Vec<f64>,
}

enum BodyCache {
    Mlp {
        input: Vec<f64>,
        pre: Vec<Vec<f64>>,
        post: Vec<Vec<f64>>,
        masks: Vec<Option<Vec<f64>>>,
    },
    Transformer {
        blocks: Vec<BlockCache>,
        lnf: LayerNormCache,
    },
}

struct BlockCache {
    ln1: Vec<LayerNormCache>,
    u: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    attn: Vec<Vec<Vec<f64>>>,
    o: Vec<Vec<f64>>,
    ln2: Vec<LayerNormCache>,
    w: Vec<Vec<f64>>,
    a1: Vec<Vec<f64>>,
    g1: Vec<Vec<f64>>,
}

fn block_forward(
    p: &[f64],
    b: &Block,
    xs: &[Vec<f64>],
    heads: usize,
) -> (Vec<Vec<f64>>, BlockCache) {
    let mut ln1 = Vec::with_capacity(SEQ);
    let mut u = Vec::with_capacity(SEQ);
    for x in xs {
        let (y, c) = layer_norm_forward(p, &b.ln1, x);
        u.push(y);
        ln1.push(c);
    }
    let q: Vec<Vec<f64>> = u.iter().map(|x| linear(p, &b.q, x)).collect();
    let k: Vec<Vec<f64>> = u.iter().map(|x| linear(p, &b.k, x)).collect();
    let v: Vec<Vec<f64>> = u.iter().map(|x| linear(p, &b.v, x)).collect();
    let (o, attn) = attention_forward(&q, &k, &v, heads);
    let mut ys = Vec::with_capacity(SEQ);
    let mut ln2 = Vec::with_capacity(SEQ);
    let mut w = Vec::with_capacity(SEQ);
    let mut a1 = Vec::with_capacity(SEQ);
    let mut g1 = Vec::with_capacity(SEQ);
    let mut out = Vec::with_capacity(SEQ);
    for s in 0..SEQ {
        let a = linear(p, &b.o, &o[s]);
        let y: Vec<f64> = xs[s].iter().zip(&a).map(|(x, a)| x + a).collect();
        let (wn, c2) = layer_norm_forward(p, &b.ln2, &y);
        let pre = linear(p, &b.ff1, &wn);
        let act: Vec<f64> = pre.iter().map(|v| gelu(*v)).collect();
        let f = linear(p, &b.ff2, &act);
        out.push(y.iter().zip(&f).map(|(y, f)| y + f).collect());
        ys.push(y);
        ln2.push(c2);
        w.push(wn);
        a1.push(pre);
        g1.push(act);
    }
    (
        out,
        BlockCache {
            ln1,
            u,
            q,
            k,
            v,
            attn,
            o,
            ln2,
            w,
            a1,
            g1,
        },
    )
}

fn block_backward(
    p: &[f64],
    g: &mut [f64],
    b: &Block,
    c: &BlockCache,
    dout: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let h = dout[0].len();
    // residual: d(out)/d(y) = I + d(ff)/d(y)
    let mut dy: Vec<Vec<f64>> = dout.to_vec();
    for s in 0..SEQ {
        let mut dact = vec![0.0; b.ff2.n_in];
        linear_backward(p, g, &b.ff2, &c.g1[s], &dout[s], Some(&mut dact));
        let dpre: Vec<f64> = dact
            .iter()
            .zip(&c.a1[s])
            .map(|(d, a)| d * gelu_grad(*a))
            .collect();
        let mut dw = vec![0.0; h];
        linear_backward(p, g, &b.ff1, &c.w[s], &dpre, Some(&mut dw));
        layer_norm_backward(p, g, &b.ln2, &c.ln2[s], &dw, &mut dy[s]);
    }
    let mut dx = dy.clone();
    let mut do_ = vec![vec![0.0; h]; SEQ];
    for s in 0..SEQ {
        linear_backward(p, g, &b.o, &c.o[s], &dy[s], Some(&mut do_[s]));
    }
    let (dq, dk, dv) = attention_backward(&c.q, &c.k, &c.v, &c.attn, &do_);
    for s in 0..SEQ {
        let mut du = vec![0.0; h];
        linear_backward(p, g, &b.q, &c.u[s], &dq[s], Some(&mut du));
        linear_backward(p, g, &b.k, &c.u[s], &dk[s], Some(&mut du));
        linear_backward(p, g, &b.v, &c.u[s], &dv[s], Some(&mut du));
        layer_norm_backward(p, g, &b.ln1, &c.ln1[s], &du, &mut dx[s]);
    }
    dx
}

impl Denoiser for DenoiserParams {
    fn predict(&self, x: &PoseVector, t: usize, cond: &[f64]) -> Result<PoseVector> {
        denoiser_forward(self, x, t, cond)
    }
}

/// Deterministic forward pass (dropout disabled).
pub fn denoiser_forward(
    params: &DenoiserParams,
    x: &PoseVector,
    t: usize,
    cond: &[f64],
) -> Result<PoseVector> {
    let (out, _) = params.forward_cached(x, t, cond, None)?;
    Ok(PoseVector(out))
}

/// Mean loss over the batch and its exact gradient.
///
/// `dropout` is the drop probability applied to MLP hidden units; each item
/// draws its mask from `dropout_seed`.
pub fn denoiser_backward(
    params: &DenoiserParams,
    batch: &[BatchItem<'_>],
    targets: &[[f64; POSE_DIM]],
    loss_kind: LossKind,
    dropout: f64,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    if batch.len() != targets.len() {
        return Err(Error::config("batch and target lengths differ"));
    }
    let weight = 1.0 / batch.len() as f64;
    let shards = batch.len().div_ceil(SHARD);
    let partial = par::try_map_indexed(shards, |s| -> Result<(f64, Vec<f64>)> {
        let mut g = vec![0.0; params.len()];
        let mut loss = 0.0;
        let end = ((s + 1) * SHARD).min(batch.len());
        for i in s * SHARD..end {
            let item = &batch[i];
            let drop = (dropout > 0.0).then_some((dropout, item.dropout_seed));
            let (pred, cache) = params.forward_cached(&item.x, item.t, item.cond, drop)?;
            let (l, dpred) = loss_and_grad(loss_kind, &pred, &targets[i], weight);
            loss += l;
            params.backward_cached(&cache, &dpred, &mut g);
        }
        Ok((loss, g))
    })?;
    let mut total = 0.0;
    let mut grads = vec![0.0; params.len()];
    for (l, g) in partial {
        total += l;
        grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((total * weight, Gradients { values: grads }))
}
