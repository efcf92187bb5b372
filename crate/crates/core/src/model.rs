//! The full lane-segment network: shared backbone over the camera views,
//! BEV encoder with temporal history, lane decoder and prediction head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::backbone::{Backbone, BackboneConfig};
use crate::bev_encoder::{BevEncoder, EncoderConfig, SpatialSampling};
use crate::dataset::{MultiViewFrame, Scene};
use crate::error::{Error, Result};
use crate::geometry::{BevGeometry, Camera, EgoMotion};
use crate::heads_loss::{total_loss, HeadOutput, LossBreakdown, LossWeights, PredictedLane, PredictionHead};
use crate::lane_decoder::{DecoderConfig, LaneDecoder};
use crate::nn::{Ctx, Initializer, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Images are standardized with these statistics before the backbone.
pub const INPUT_MEAN: Scalar = 0.35;
pub const INPUT_STD: Scalar = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub zero_init_residual: bool,
    pub geometry: BevGeometry,
    pub dim: usize,
    pub heads: usize,
    /// Sampling points per head and level in deformable attention.
    pub points: usize,
    pub pillar_heights: Vec<Scalar>,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub queries: usize,
    /// Points per predicted polyline.
    pub lane_points: usize,
    pub loss: LossWeights,
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            geometry: self.geometry,
            dim: self.dim,
            heads: self.heads,
            points: self.points,
            pillar_heights: self.pillar_heights.clone(),
            ffn_dim: self.ffn_dim,
            layers: self.encoder_layers,
            feature_channels: self.backbone.output_channels(),
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            dim: self.dim,
            heads: self.heads,
            points: self.points,
            ffn_dim: self.ffn_dim,
            layers: self.decoder_layers,
            queries: self.queries,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LaneSegModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub encoder: BevEncoder,
    pub decoder: LaneDecoder,
    pub head: PredictionHead,
}

/// Outputs of one frame: the BEV grid and one head output per decoder layer.
pub struct FrameOutput<'t> {
    pub bev: Var<'t>,
    pub layers: Vec<HeadOutput<'t>>,
}

/// Scene loss: the mean over frames of the per-frame decoder-layer loss.
pub struct SceneLoss<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
}

impl LaneSegModel {
    /// Builds the network and its parameters from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        if cfg.queries == 0 || cfg.lane_points < 2 {
            return Err(Error::Config("need at least one query and two points per lane".into()));
        }
        let mut store = ParamStore::new();
        let model = {
            let mut init = Initializer::new(&mut store, ChaCha8Rng::seed_from_u64(seed));
            Self {
                cfg: cfg.clone(),
                backbone: Backbone::new(&mut init, &cfg.backbone, cfg.zero_init_residual)?,
                encoder: BevEncoder::new(&mut init, &cfg.encoder())?,
                decoder: LaneDecoder::new(&mut init, &cfg.decoder())?,
                head: PredictionHead::new(&mut init, cfg.dim, cfg.lane_points)?,
            }
        };
        Ok((model, store))
    }

    pub fn sampling(&self, cameras: &[Camera]) -> Result<SpatialSampling> {
        SpatialSampling::new(&self.cfg.geometry, cameras, &self.cfg.pillar_heights)
    }

    /// Runs one frame. `history` is the previous frame's BEV (detached) and
    /// `motion` maps current to previous ego coordinates.
    pub fn frame<'t>(
        &self,
        cx: &Ctx<'t, '_>,
        frame: &MultiViewFrame,
        sampling: &SpatialSampling,
        history: Option<&Tensor>,
        motion: &EgoMotion,
    ) -> Result<FrameOutput<'t>> {
        let views: Vec<Tensor> = frame
            .images
            .iter()
            .map(|img| img.to_tensor().map(|v| (v - INPUT_MEAN) / INPUT_STD))
            .collect();
        let features = self.backbone.extract_features(cx, &views)?;
        let bev = self.encoder.encode(cx, features, sampling, history, motion)?;
        let layers = self
            .decoder
            .decode(cx, bev, &self.cfg.geometry)?
            .iter()
            .map(|q| self.head.forward(cx, q, &self.cfg.geometry.extent))
            .collect::<Result<Vec<_>>>()?;
        Ok(FrameOutput { bev, layers })
    }

    /// Runs every frame of `scene` in order, threading the BEV history, and
    /// calls `visit` with each frame's output.
    fn run_scene<'t>(
        &self,
        cx: &Ctx<'t, '_>,
        scene: &Scene,
        mut visit: impl FnMut(&MultiViewFrame, &FrameOutput<'t>) -> Result<()>,
    ) -> Result<()> {
        let sampling = self.sampling(&scene.cameras)?;
        let mut history: Option<Tensor> = None;
        let mut prev_pose = None;
        for frame in &scene.frames {
            let motion = prev_pose.map_or_else(EgoMotion::identity, |p| EgoMotion::between(p, frame.pose));
            let out = self.frame(cx, frame, &sampling, history.as_ref(), &motion)?;
            visit(frame, &out)?;
            history = Some((*out.bev.value()).clone());
            prev_pose = Some(frame.pose);
        }
        Ok(())
    }

    /// Training loss of a scene.
    pub fn scene_loss<'t>(&self, cx: &Ctx<'t, '_>, scene: &Scene) -> Result<SceneLoss<'t>> {
        let mut total: Option<Var<'t>> = None;
        let mut breakdown = LossBreakdown::default();
        let s = 1.0 / scene.frames.len() as Scalar;
        self.run_scene(cx, scene, |frame, out| {
            let loss = total_loss(cx, &out.layers, &frame.lanes, &self.cfg.loss, &self.cfg.geometry.extent)?;
            breakdown.cls += s * loss.breakdown.cls;
            breakdown.pts += s * loss.breakdown.pts;
            breakdown.bnd += s * loss.breakdown.bnd;
            total = Some(match total {
                Some(t) => t.add(loss.total)?,
                None => loss.total,
            });
            Ok(())
        })?;
        let total = total.ok_or_else(|| Error::Input(format!("scene {} has no frames", scene.id)))?;
        Ok(SceneLoss {
            total: total.scale(s)?,
            breakdown,
        })
    }

    /// Final-layer predictions for every frame of `scene`, one per query.
    pub fn predict(&self, store: &ParamStore, scene: &Scene) -> Result<Vec<Vec<PredictedLane>>> {
        let tape = crate::autodiff::Tape::new();
        let cx = Ctx::new(&tape, store);
        let mut frames = Vec::with_capacity(scene.frames.len());
        self.run_scene(&cx, scene, |_, out| {
            frames.push(out.layers.last().expect("at least one decoder layer").predictions());
            Ok(())
        })?;
        Ok(frames)
    }
}
