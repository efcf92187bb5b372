//! Lane decoder: learned lane queries refined by self-attention among
//! themselves, deformable cross-attention into the BEV grid and a
//! feed-forward block, with per-layer reference point refinement.

use crate::autodiff::{self, Var};
use crate::bev_encoder::DeformAttention;
use crate::error::{Error, Result};
use crate::geometry::BevGeometry;
use crate::nn::{Ctx, Initializer, LayerNorm, Linear, Mlp, ParamId};
use crate::tensor::{Scalar, Tensor};

pub const EVENT_SELF_ATTN: &str = "decoder.self_attention";
pub const EVENT_CROSS_ATTN: &str = "decoder.cross_attention";
pub const EVENT_FFN: &str = "decoder.ffn";

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub points: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    pub queries: usize,
}

/// Lane query embeddings `[N_q, D]` with reference logits `[N_q, 2]`; the
/// reference point is `sigmoid(logits)` in normalized BEV `(u, v)`.
#[derive(Clone, Copy, Debug)]
pub struct LaneQuerySet<'t> {
    pub embed: Var<'t>,
    pub ref_logits: Var<'t>,
}

impl<'t> LaneQuerySet<'t> {
    pub fn len(&self) -> usize {
        self.embed.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reference points `sigmoid(logits)`, outside the tape.
    pub fn reference_points(&self) -> Tensor {
        self.ref_logits.value().map(crate::autodiff::sigmoid)
    }
}

/// Standard multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Initializer<'_>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: embedding dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            query: Linear::new(init, &format!("{name}.query"), dim, dim)?,
            key: Linear::new(init, &format!("{name}.key"), dim, dim)?,
            value: Linear::new(init, &format!("{name}.value"), dim, dim)?,
            out: Linear::new(init, &format!("{name}.out"), dim, dim)?,
        })
    }

    /// Attention of `q_in` over `k_in`/`v_in` (rows are tokens), with scale
    /// `1/√(D/heads)` and the output projection applied.
    pub fn forward<'t>(&self, cx: &Ctx<'t, '_>, q_in: Var<'t>, k_in: Var<'t>, v_in: Var<'t>) -> Result<Var<'t>> {
        let dim = self.query.out_dim;
        let hd = dim / self.heads;
        let q = self.query.forward(cx, q_in)?;
        let k = self.key.forward(cx, k_in)?;
        let v = self.value.forward(cx, v_in)?;
        let scale = 1.0 / (hd as Scalar).sqrt();
        let heads = (0..self.heads)
            .map(|h| {
                let qh = q.narrow(1, h * hd, hd)?;
                let kh = k.narrow(1, h * hd, hd)?;
                let vh = v.narrow(1, h * hd, hd)?;
                qh.matmul(kh.t()?)?.scale(scale)?.softmax(1)?.matmul(vh)
            })
            .collect::<Result<Vec<_>>>()?;
        self.out.forward(cx, autodiff::concat(&heads, 1)?)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: DeformAttention,
    pub ffn: Mlp,
    pub norms: [LayerNorm; 3],
    /// Emits reference-logit updates; output layer starts at zero.
    pub refine: Mlp,
}

impl DecoderLayer {
    fn new(init: &mut Initializer<'_>, name: &str, cfg: &DecoderConfig) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(init, &format!("{name}.self_attn"), cfg.dim, cfg.heads)?,
            cross_attn: DeformAttention::new(init, &format!("{name}.cross_attn"), cfg.dim, cfg.dim, cfg.heads, 1, cfg.points)?,
            ffn: Mlp::new(init, &format!("{name}.ffn"), cfg.dim, cfg.ffn_dim, cfg.dim)?,
            norms: [
                LayerNorm::new(init, &format!("{name}.norm1"), cfg.dim)?,
                LayerNorm::new(init, &format!("{name}.norm2"), cfg.dim)?,
                LayerNorm::new(init, &format!("{name}.norm3"), cfg.dim)?,
            ],
            refine: Mlp::zero_output(init, &format!("{name}.refine"), cfg.dim, cfg.dim, 2)?,
        })
    }

    /// One refinement step: the returned reference logits are the incoming
    /// ones plus the refinement head's update. Sampling locations are taken
    /// as constants.
    pub fn forward<'t>(
        &self,
        cx: &Ctx<'t, '_>,
        q: LaneQuerySet<'t>,
        query_pos: Var<'t>,
        bev: Var<'t>,
        geometry: &BevGeometry,
    ) -> Result<LaneQuerySet<'t>> {
        let tape = cx.tape();
        let x = q.embed;
        tape.record_event(EVENT_SELF_ATTN);
        let qk = x.add(query_pos)?;
        let x = self.norms[0].forward(cx, x.add(self.self_attn.forward(cx, qk, qk, x)?)?)?;

        tape.record_event(EVENT_CROSS_ATTN);
        let refs = q.reference_points();
        let ca = self
            .cross_attn
            .forward(cx, x.add(query_pos)?, &refs, bev, &[(geometry.rows, geometry.cols)])?;
        let x = self.norms[1].forward(cx, x.add(ca)?)?;

        tape.record_event(EVENT_FFN);
        let x = self.norms[2].forward(cx, x.add(self.ffn.forward(cx, x)?)?)?;

        let ref_logits = q.ref_logits.add(self.refine.forward(cx, x)?)?;
        Ok(LaneQuerySet { embed: x, ref_logits })
    }
}

#[derive(Clone, Debug)]
pub struct LaneDecoder {
    pub cfg: DecoderConfig,
    pub query_embed: ParamId,
    pub query_pos: ParamId,
    pub ref_logits: ParamId,
    pub layers: Vec<DecoderLayer>,
}

impl LaneDecoder {
    pub fn new(init: &mut Initializer<'_>, cfg: &DecoderConfig) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if cfg.queries == 0 {
            return Err(Error::Config("decoder needs at least one query".into()));
        }
        let query_embed = init.normal("decoder.query_embed", &[cfg.queries, cfg.dim], 1.0)?;
        let query_pos = init.normal("decoder.query_pos", &[cfg.queries, cfg.dim], 1.0)?;
        let ref_logits = init.uniform("decoder.ref_logits", &[cfg.queries, 2], 1.5)?;
        let layers = (0..cfg.layers)
            .map(|i| DecoderLayer::new(init, &format!("decoder.layer{i}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            query_embed,
            query_pos,
            ref_logits,
            layers,
        })
    }

    pub fn initial_queries<'t>(&self, cx: &Ctx<'t, '_>) -> (LaneQuerySet<'t>, Var<'t>) {
        (
            LaneQuerySet {
                embed: cx.param(self.query_embed),
                ref_logits: cx.param(self.ref_logits),
            },
            cx.param(self.query_pos),
        )
    }

    /// Runs every layer from explicit initial queries, returning each
    /// layer's output. Reference logits are detached between layers, so each
    /// layer's refinement is trained only by its own predictions.
    pub fn decode_from<'t>(
        &self,
        cx: &Ctx<'t, '_>,
        q0: LaneQuerySet<'t>,
        query_pos: Var<'t>,
        bev: Var<'t>,
        geometry: &BevGeometry,
    ) -> Result<Vec<LaneQuerySet<'t>>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut q = q0;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                q.ref_logits = q.ref_logits.detach();
            }
            q = layer.forward(cx, q, query_pos, bev, geometry)?;
            out.push(q);
        }
        Ok(out)
    }

    /// Decodes the BEV grid `[H_bev·W_bev, D]` with the learned queries.
    pub fn decode<'t>(&self, cx: &Ctx<'t, '_>, bev: Var<'t>, geometry: &BevGeometry) -> Result<Vec<LaneQuerySet<'t>>> {
        let (q0, pos) = self.initial_queries(cx);
        self.decode_from(cx, q0, pos, bev, geometry)
    }
}
