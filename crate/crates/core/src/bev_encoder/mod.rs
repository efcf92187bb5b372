//! BEV encoder: a learned query grid refined by temporal self-attention over
//! the motion-aligned previous BEV and spatial cross-attention into the
//! camera features.

mod deform;
mod spatial;
mod temporal;

pub use deform::DeformAttention;
pub use spatial::{cross_attend, pv_tokens, SpatialSampling, ViewHits};
pub use temporal::warp_history;

use crate::autodiff::{self, Var};
use crate::error::{Error, Result};
use crate::geometry::{BevGeometry, EgoMotion};
use crate::nn::{Ctx, Initializer, LayerNorm, Mlp, ParamId};
use crate::tensor::{Scalar, Tensor};

/// Tape event names recorded once per sub-block application.
pub const EVENT_TSA: &str = "encoder.temporal_self_attention";
pub const EVENT_SCA: &str = "encoder.spatial_cross_attention";
pub const EVENT_FFN: &str = "encoder.ffn";

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub geometry: BevGeometry,
    pub dim: usize,
    pub heads: usize,
    pub points: usize,
    pub pillar_heights: Vec<Scalar>,
    pub ffn_dim: usize,
    pub layers: usize,
    /// Channels of the backbone feature maps.
    pub feature_channels: usize,
}

impl EncoderConfig {
    /// `n` heights evenly spaced over `[lo, hi]`.
    pub fn pillar(lo: Scalar, hi: Scalar, n: usize) -> Vec<Scalar> {
        if n == 1 {
            return vec![lo];
        }
        (0..n).map(|i| lo + (hi - lo) * i as Scalar / (n - 1) as Scalar).collect()
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub tsa: DeformAttention,
    pub sca: DeformAttention,
    pub ffn: Mlp,
    pub norms: [LayerNorm; 3],
}

impl EncoderLayer {
    fn new(init: &mut Initializer<'_>, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            tsa: DeformAttention::new(init, &format!("{name}.tsa"), cfg.dim, cfg.dim, cfg.heads, 2, cfg.points)?,
            sca: DeformAttention::new(
                init,
                &format!("{name}.sca"),
                cfg.dim,
                cfg.feature_channels,
                cfg.heads,
                cfg.pillar_heights.len(),
                cfg.points,
            )?,
            ffn: Mlp::new(init, &format!("{name}.ffn"), cfg.dim, cfg.ffn_dim, cfg.dim)?,
            norms: [
                LayerNorm::new(init, &format!("{name}.norm1"), cfg.dim)?,
                LayerNorm::new(init, &format!("{name}.norm2"), cfg.dim)?,
                LayerNorm::new(init, &format!("{name}.norm3"), cfg.dim)?,
            ],
        })
    }

    /// `bev + attention(bev + pos over [bev, history])`. Without history the
    /// grid attends to itself only. `history` must already be warped into the
    /// current frame.
    pub fn temporal_self_attention<'t>(
        &self,
        cx: &Ctx<'t, '_>,
        geometry: &BevGeometry,
        bev: Var<'t>,
        pos: Var<'t>,
        history: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        cx.tape().record_event(EVENT_TSA);
        let grid = (geometry.rows, geometry.cols);
        let refs = Tensor::new(vec![geometry.num_cells(), 2], geometry.reference_points())?;
        let (values, levels) = match history {
            Some(h) => {
                if h.shape() != bev.shape() {
                    return Err(Error::Dimension(format!(
                        "history BEV {:?} does not match current BEV {:?}",
                        h.shape(),
                        bev.shape()
                    )));
                }
                (autodiff::concat(&[bev, h], 0)?, vec![grid, grid])
            }
            None => (bev, vec![grid]),
        };
        let out = self.tsa.forward(cx, bev.add(pos)?, &refs, values, &levels)?;
        bev.add(out)
    }

    /// `bev + cross_attention(bev + pos, cameras)`; cells no camera sees are
    /// returned unchanged.
    pub fn spatial_cross_attention<'t>(
        &self,
        cx: &Ctx<'t, '_>,
        bev: Var<'t>,
        pos: Var<'t>,
        tokens: Var<'t>,
        feature_dims: (usize, usize),
        sampling: &SpatialSampling,
    ) -> Result<Var<'t>> {
        cx.tape().record_event(EVENT_SCA);
        let out = cross_attend(cx, &self.sca, bev.add(pos)?, tokens, feature_dims, sampling)?;
        bev.add(out)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t>(
        &self,
        cx: &Ctx<'t, '_>,
        geometry: &BevGeometry,
        bev: Var<'t>,
        pos: Var<'t>,
        history: Option<Var<'t>>,
        tokens: Var<'t>,
        feature_dims: (usize, usize),
        sampling: &SpatialSampling,
    ) -> Result<Var<'t>> {
        let x = self.temporal_self_attention(cx, geometry, bev, pos, history)?;
        let x = self.norms[0].forward(cx, x)?;
        let x = self.spatial_cross_attention(cx, x, pos, tokens, feature_dims, sampling)?;
        let x = self.norms[1].forward(cx, x)?;
        cx.tape().record_event(EVENT_FFN);
        let x = x.add(self.ffn.forward(cx, x)?)?;
        self.norms[2].forward(cx, x)
    }
}

#[derive(Clone, Debug)]
pub struct BevEncoder {
    pub cfg: EncoderConfig,
    pub embed: ParamId,
    pub pos: ParamId,
    pub layers: Vec<EncoderLayer>,
}

impl BevEncoder {
    pub fn new(init: &mut Initializer<'_>, cfg: &EncoderConfig) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if cfg.pillar_heights.is_empty() {
            return Err(Error::Config("encoder needs at least one pillar height".into()));
        }
        let n = cfg.geometry.num_cells();
        let embed = init.normal("encoder.bev_embed", &[n, cfg.dim], 1.0)?;
        let pos = init.normal("encoder.bev_pos", &[n, cfg.dim], 1.0)?;
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(init, &format!("encoder.layer{i}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            pos,
            layers,
        })
    }

    /// Encodes one frame.
    ///
    /// `features` are the backbone maps `[V, C, H, W]` of the cameras
    /// described by `sampling`; `history` is the previous frame's encoder
    /// output (held outside the tape) and `motion` maps current to previous
    /// ego coordinates. Returns the BEV grid `[H_bev·W_bev, D]`.
    pub fn encode<'t>(
        &self,
        cx: &Ctx<'t, '_>,
        features: Var<'t>,
        sampling: &SpatialSampling,
        history: Option<&Tensor>,
        motion: &EgoMotion,
    ) -> Result<Var<'t>> {
        let fs = features.shape();
        if fs.len() != 4 || fs[0] != sampling.views.len() || fs[1] != self.cfg.feature_channels {
            return Err(Error::Dimension(format!(
                "features {fs:?} do not match {} cameras with {} channels",
                sampling.views.len(),
                self.cfg.feature_channels
            )));
        }
        let feature_dims = (fs[2], fs[3]);
        let tokens = pv_tokens(features)?;
        let history = match history {
            Some(h) => Some(cx.constant(warp_history(h, &self.cfg.geometry, motion)?)),
            None => None,
        };
        let pos = cx.param(self.pos);
        let mut bev = cx.param(self.embed);
        for layer in &self.layers {
            bev = layer.forward(cx, &self.cfg.geometry, bev, pos, history, tokens, feature_dims, sampling)?;
        }
        Ok(bev)
    }
}

#[cfg(test)]
mod tests;
