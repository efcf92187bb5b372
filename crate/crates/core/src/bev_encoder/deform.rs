use std::f64::consts::PI;

use crate::autodiff::{self, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Initializer, Linear};
use crate::tensor::{Scalar, Tensor};

/// Deformable attention: every query predicts `K` sampling offsets and
/// attention logits per head and level around its reference point, samples
/// the projected value maps bilinearly there, and mixes the samples.
///
/// Offsets are expressed in cells of the sampled level; logits are
/// normalized jointly over all `levels × K` samples of a head.
#[derive(Clone, Debug)]
pub struct DeformAttention {
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub dim: usize,
    pub offsets: Linear,
    pub logits: Linear,
    pub value_proj: Linear,
    pub out_proj: Linear,
}

impl DeformAttention {
    /// Offset weights start at zero with a per-head directional bias so the
    /// initial samples form small rays (0.5–`K/2` cells) around the
    /// reference point; logits start uniform.
    pub fn new(
        init: &mut Initializer<'_>,
        name: &str,
        dim: usize,
        value_dim: usize,
        heads: usize,
        levels: usize,
        points: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: embedding dim {dim} is not divisible by {heads} heads"
            )));
        }
        let n_off = heads * levels * points * 2;
        let mut bias = Vec::with_capacity(n_off);
        for h in 0..heads {
            let theta = 2.0 * PI * h as Scalar / heads as Scalar;
            let (s, c) = theta.sin_cos();
            let norm = c.abs().max(s.abs());
            for _ in 0..levels {
                for k in 0..points {
                    let r = 0.5 * (k + 1) as Scalar;
                    bias.push(r * c / norm);
                    bias.push(r * s / norm);
                }
            }
        }
        let offsets = Linear {
            weight: init.zeros(&format!("{name}.offsets.weight"), &[dim, n_off])?,
            bias: Some(init.tensor(&format!("{name}.offsets.bias"), Tensor::new(vec![n_off], bias)?)?),
            in_dim: dim,
            out_dim: n_off,
        };
        Ok(Self {
            heads,
            levels,
            points,
            dim,
            offsets,
            logits: Linear::zeroed(init, &format!("{name}.logits"), dim, heads * levels * points)?,
            value_proj: Linear::new(init, &format!("{name}.value"), value_dim, dim)?,
            out_proj: Linear::new(init, &format!("{name}.out"), dim, dim)?,
        })
    }

    /// Attention output before the output projection, `[N, D]`.
    ///
    /// `values` holds the raw (unprojected) maps as stacked channel-last
    /// token rows, one block per entry of `level_dims`; fewer levels than
    /// configured use the leading offset/logit groups. `refs` is `[N, 2]`
    /// normalized `(u, v)`.
    pub fn sample<'t>(
        &self,
        cx: &Ctx<'t, '_>,
        queries: Var<'t>,
        refs: &Tensor,
        values: Var<'t>,
        level_dims: &[(usize, usize)],
    ) -> Result<Var<'t>> {
        let n = queries.shape()[0];
        let l = level_dims.len();
        if l == 0 || l > self.levels {
            return Err(Error::Config(format!(
                "deformable attention configured for {} levels, got {l}",
                self.levels
            )));
        }
        if refs.shape() != [n, 2] {
            return Err(Error::shape("deformable attention refs", refs.shape(), &[n, 2]));
        }
        let (h, k) = (self.heads, self.points);
        let mut offsets = self.offsets.forward(cx, queries)?.reshape(vec![n, h, self.levels, k, 2])?;
        if l < self.levels {
            offsets = offsets.narrow(2, 0, l)?;
        }
        let mut scale = Vec::with_capacity(2 * l);
        for &(lh, lw) in level_dims {
            scale.push(1.0 / lw as Scalar);
            scale.push(1.0 / lh as Scalar);
        }
        let scale = cx.constant(Tensor::new(vec![1, 1, l, 1, 2], scale)?);
        let refs = cx.constant(refs.clone().reshape(vec![n, 1, 1, 1, 2])?);
        let points = offsets.mul(scale)?.add(refs)?;

        let mut logits = self.logits.forward(cx, queries)?.reshape(vec![n, h, self.levels * k])?;
        if l < self.levels {
            logits = logits.narrow(2, 0, l * k)?;
        }
        let weights = logits.softmax(2)?.reshape(vec![n, h, l, k])?;
        let values = self.value_proj.forward(cx, values)?;
        autodiff::deform_sample(values, level_dims, points, weights)
    }

    pub fn forward<'t>(
        &self,
        cx: &Ctx<'t, '_>,
        queries: Var<'t>,
        refs: &Tensor,
        values: Var<'t>,
        level_dims: &[(usize, usize)],
    ) -> Result<Var<'t>> {
        let s = self.sample(cx, queries, refs, values, level_dims)?;
        self.out_proj.forward(cx, s)
    }
}
