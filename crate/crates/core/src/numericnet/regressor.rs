//! Direct embedding-to-pose regressor with dropout on every hidden layer.
//! Kept stochastic at inference it becomes the MC-Dropout baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::denoiser::{dropout_mask, POSE_DIM};
use super::layers::{gelu, gelu_grad, linear, linear_backward, Allocator, LinearSpec};
use super::{loss_and_grad, snap_to_f32, Gradients, LossKind};
use crate::error::{Error, Result};
use crate::par;

const SHARD: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressorShape {
    pub cond_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Regressor {
    pub shape: RegressorShape,
    pub values: Vec<f64>,
    hidden: Vec<LinearSpec>,
    head: LinearSpec,
}

struct Trace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
}

fn layout(shape: &RegressorShape) -> (Vec<LinearSpec>, LinearSpec, Allocator) {
    let mut a = Allocator::default();
    let mut n_in = shape.cond_dim;
    let hidden = (0..shape.layers)
        .map(|_| {
            let l = a.linear(n_in, shape.hidden_dim);
            n_in = shape.hidden_dim;
            l
        })
        .collect();
    let head = a.linear(n_in, POSE_DIM);
    (hidden, head, a)
}

impl Regressor {
    pub fn init(shape: RegressorShape, seed: u64) -> Result<Self> {
        if shape.cond_dim == 0 || shape.hidden_dim == 0 || shape.layers == 0 {
            return Err(Error::config("regressor dimensions must be > 0"));
        }
        let (hidden, head, alloc) = layout(&shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; alloc.len];
        for l in &alloc.linears {
            let dist = Normal::new(0.0, 1.0 / (l.n_in as f64).sqrt()).unwrap();
            for v in &mut values[l.w..l.w + l.n_in * l.n_out] {
                *v = dist.sample(&mut rng);
            }
        }
        snap_to_f32(&mut values);
        Ok(Regressor {
            shape,
            values,
            hidden,
            head,
        })
    }

    pub fn from_values(shape: RegressorShape, values: Vec<f64>) -> Result<Self> {
        let (hidden, head, alloc) = layout(&shape);
        if values.len() != alloc.len {
            return Err(Error::data(format!(
                "parameter count {} does not match regressor shape ({} expected)",
                values.len(),
                alloc.len
            )));
        }
        Ok(Regressor {
            shape,
            values,
            hidden,
            head,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn trace(&self, cond: &[f64], dropout: Option<(f64, u64)>) -> Result<([f64; POSE_DIM], Trace)> {
        if cond.len() != self.shape.cond_dim {
            return Err(Error::config(format!(
                "condition has dimension {}, regressor expects {}",
                cond.len(),
                self.shape.cond_dim
            )));
        }
        let p = &self.values;
        let mut rng = dropout.map(|(_, s)| ChaCha8Rng::seed_from_u64(s));
        let mut pre = Vec::with_capacity(self.hidden.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.hidden.len());
        let mut masks = Vec::with_capacity(self.hidden.len());
        for (i, l) in self.hidden.iter().enumerate() {
            let z_in = if i == 0 { cond } else { &post[i - 1] };
            let a = linear(p, l, z_in);
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
        let out_v = linear(p, &self.head, post.last().expect("layers > 0"));
        if out_v.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation {
                layer: self.hidden.len(),
            });
        }
        let mut out = [0.0; POSE_DIM];
        out.copy_from_slice(&out_v);
        Ok((
            out,
            Trace {
                input: cond.to_vec(),
                pre,
                post,
                masks,
            },
        ))
    }

    /// One forward pass; `dropout = Some((p, seed))` samples a mask.
    pub fn forward(&self, cond: &[f64], dropout: Option<(f64, u64)>) -> Result<[f64; POSE_DIM]> {
        Ok(self.trace(cond, dropout)?.0)
    }

    fn backward(&self, tr: &Trace, dout: &[f64], g: &mut [f64]) {
        let p = &self.values;
        let mut dz = vec![0.0; self.head.n_in];
        linear_backward(
            p,
            g,
            &self.head,
            tr.post.last().unwrap(),
            dout,
            Some(&mut dz),
        );
        for i in (0..self.hidden.len()).rev() {
            let da: Vec<f64> = dz
                .iter()
                .enumerate()
                .map(|(j, d)| {
                    let m = tr.masks[i].as_ref().map_or(1.0, |m| m[j]);
                    d * m * gelu_grad(tr.pre[i][j])
                })
                .collect();
            let z_in = if i == 0 { &tr.input } else { &tr.post[i - 1] };
            let mut dz_in = vec![0.0; self.hidden[i].n_in];
            let dx = (i > 0).then_some(&mut dz_in[..]);
            linear_backward(p, g, &self.hidden[i], z_in, &da, dx);
            dz = dz_in;
        }
    }

    /// Mean loss over `(condition, target, dropout seed)` examples and its
    /// gradient.
    pub fn loss_and_gradient(
        &self,
        conds: &[&[f64]],
        targets: &[[f64; POSE_DIM]],
        seeds: &[u64],
        loss_kind: LossKind,
        dropout: f64,
    ) -> Result<(f64, Gradients)> {
        if conds.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let weight = 1.0 / conds.len() as f64;
        let shards = conds.len().div_ceil(SHARD);
        let partial = par::try_map_indexed(shards, |s| -> Result<(f64, Vec<f64>)> {
            let mut g = vec![0.0; self.len()];
            let mut loss = 0.0;
            for i in s * SHARD..((s + 1) * SHARD).min(conds.len()) {
                let drop = (dropout > 0.0).then_some((dropout, seeds[i]));
                let (pred, tr) = self.trace(conds[i], drop)?;
                let (l, d) = loss_and_grad(loss_kind, &pred, &targets[i], weight);
                loss += l;
                self.backward(&tr, &d, &mut g);
            }
            Ok((loss, g))
        })?;
        let mut total = 0.0;
        let mut grads = vec![0.0; self.len()];
        for (l, g) in partial {
            total += l;
            grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        Ok((total * weight, Gradients { values: grads }))
    }
}
