//! Experiment configuration: line-oriented `key = value` text with `#`
//! comments, named presets, and `key=value` overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::bev_encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::geometry::{BevExtent, BevGeometry};
use crate::heads_loss::LossWeights;
use crate::model::ModelConfig;
use crate::tensor::Scalar;

/// Experiment presets: the 3:6 baseline, the shallow-backbone variant, and
/// the 2:4 and 4:8 encoder:decoder ratios.
pub const PRESETS: [&str; 4] = ["baseline-3:6", "shallow-backbone", "2:4", "4:8"];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub preset: String,
    pub backbone: String,
    pub zero_init_residual: bool,
    pub embed_dim: usize,
    pub heads: usize,
    pub deform_points: usize,
    pub pillar_points: usize,
    pub pillar_min: Scalar,
    pub pillar_max: Scalar,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub bev_rows: usize,
    pub bev_cols: usize,
    pub queries: usize,
    pub lane_points: usize,
    pub loss_cls: Scalar,
    pub loss_pts: Scalar,
    pub loss_bnd: Scalar,
    pub loss_background: Scalar,
    pub lr: Scalar,
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub eps: Scalar,
    pub weight_decay: Scalar,
    pub grad_clip: Scalar,
    pub warmup_steps: u64,
    pub epochs: u64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: "baseline-3:6".into(),
            backbone: "toy-bottleneck".into(),
            zero_init_residual: true,
            embed_dim: 32,
            heads: 4,
            deform_points: 4,
            pillar_points: 4,
            pillar_min: 0.0,
            pillar_max: 3.0,
            ffn_dim: 64,
            encoder_layers: 3,
            decoder_layers: 6,
            bev_rows: 25,
            bev_cols: 13,
            queries: 16,
            lane_points: 10,
            loss_cls: 2.0,
            loss_pts: 5.0,
            loss_bnd: 2.5,
            loss_background: 0.1,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 35.0,
            warmup_steps: 0,
            epochs: 30,
            batch_size: 1,
            checkpoint_every: 10,
            seed: 0,
            dataset_dir: "data/train".into(),
            checkpoint_dir: "runs/baseline".into(),
        }
    }
}

/// Keys that do not change what a training step computes, so they are left
/// out of the config hash (a run may be resumed with more epochs or from
/// moved directories).
const UNHASHED: [&str; 5] = ["epochs", "checkpoint_every", "dataset_dir", "checkpoint_dir", "preset"];

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value `{value}` for `{key}`"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

fn parse_float(key: &str, value: &str) -> Result<Scalar> {
    let v: Scalar = parse_num(key, value)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(bad(key, value))
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

macro_rules! config_keys {
    ($($key:ident : $kind:ident),* $(,)?) => {
        pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

        /// Sets one key from its text form.
        pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
            match key {
                $(stringify!($key) => self.$key = config_keys!(@parse $kind, key, value)?,)*
                _ => {
                    return Err(Error::Config(format!(
                        "unknown key `{key}`; valid keys: {}",
                        Self::KEYS.join(", ")
                    )))
                }
            }
            Ok(())
        }

        /// `(key, value)` pairs in canonical order.
        pub fn entries(&self) -> Vec<(&'static str, String)> {
            vec![$((stringify!($key), config_keys!(@show $kind, self.$key))),*]
        }
    };
    (@parse string, $k:expr, $v:expr) => { Ok::<String, Error>($v.to_string()) };
    (@parse path, $k:expr, $v:expr) => { Ok::<PathBuf, Error>(PathBuf::from($v)) };
    (@parse bool, $k:expr, $v:expr) => { parse_bool($k, $v) };
    (@parse float, $k:expr, $v:expr) => { parse_float($k, $v) };
    (@parse int, $k:expr, $v:expr) => { parse_num($k, $v) };
    (@show string, $x:expr) => { $x.clone() };
    (@show path, $x:expr) => { $x.display().to_string() };
    (@show bool, $x:expr) => { $x.to_string() };
    (@show float, $x:expr) => { format!("{:?}", $x) };
    (@show int, $x:expr) => { $x.to_string() };
}

impl ExperimentConfig {
    config_keys! {
        preset: string,
        backbone: string,
        zero_init_residual: bool,
        embed_dim: int,
        heads: int,
        deform_points: int,
        pillar_points: int,
        pillar_min: float,
        pillar_max: float,
        ffn_dim: int,
        encoder_layers: int,
        decoder_layers: int,
        bev_rows: int,
        bev_cols: int,
        queries: int,
        lane_points: int,
        loss_cls: float,
        loss_pts: float,
        loss_bnd: float,
        loss_background: float,
        lr: float,
        beta1: float,
        beta2: float,
        eps: float,
        weight_decay: float,
        grad_clip: float,
        warmup_steps: int,
        epochs: int,
        batch_size: int,
        checkpoint_every: int,
        seed: int,
        dataset_dir: path,
        checkpoint_dir: path,
    }

    /// Named preset; every other key keeps its default.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self {
            preset: name.to_string(),
            ..Self::default()
        };
        let cfg = match name {
            "baseline-3:6" => base,
            "shallow-backbone" => Self {
                backbone: "toy-basic".into(),
                ..base
            },
            "2:4" => Self {
                encoder_layers: 2,
                decoder_layers: 4,
                ..base
            },
            "4:8" => Self {
                encoder_layers: 4,
                decoder_layers: 8,
                ..base
            },
            _ => {
                return Err(Error::Config(format!(
                    "unknown experiment preset `{name}`; valid presets: {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    /// Applies `key = value` lines; `#` starts a comment. Errors carry the
    /// byte offset of the offending line.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        let mut offset = 0;
        for raw in text.split_inclusive('\n') {
            let line = raw.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                let err = |msg: String| Error::Parse {
                    path: path.to_path_buf(),
                    offset,
                    msg,
                };
                let (key, value) = line
                    .split_once('=')
                    .ok_or_else(|| err("expected `key = value`".into()))?;
                self.set(key.trim(), value.trim()).map_err(|e| err(e.to_string()))?;
            }
            offset += raw.len();
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not `key=value`")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Fully resolved config in the file format; parsing it reproduces
    /// `self` exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 over the canonical text of every key that affects training.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !UNHASHED.contains(&k) {
                h.update(format!("{k} = {v}\n").as_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.into())) };
        check(self.encoder_layers >= 1 && self.decoder_layers >= 1, "encoder and decoder need at least one layer")?;
        check(self.embed_dim > 0 && self.heads > 0 && self.embed_dim % self.heads == 0, "embed_dim must be a positive multiple of heads")?;
        check(self.deform_points > 0 && self.pillar_points > 0 && self.ffn_dim > 0, "deform_points, pillar_points and ffn_dim must be positive")?;
        check(self.bev_rows > 0 && self.bev_cols > 0, "BEV grid must be non-empty")?;
        check(self.queries > 0 && self.lane_points >= 2, "need queries > 0 and lane_points >= 2")?;
        check(self.lr > 0.0, "lr must be positive")?;
        check((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "betas must lie in [0, 1)")?;
        check(self.eps > 0.0 && self.weight_decay >= 0.0 && self.grad_clip > 0.0, "eps and grad_clip must be positive, weight_decay non-negative")?;
        check(self.batch_size >= 1, "batch_size must be at least 1")?;
        BackboneConfig::preset(&self.backbone)?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.validate()?;
        Ok(ModelConfig {
            backbone: BackboneConfig::preset(&self.backbone)?,
            zero_init_residual: self.zero_init_residual,
            geometry: BevGeometry {
                rows: self.bev_rows,
                cols: self.bev_cols,
                extent: BevExtent::default(),
            },
            dim: self.embed_dim,
            heads: self.heads,
            points: self.deform_points,
            pillar_heights: EncoderConfig::pillar(self.pillar_min, self.pillar_max, self.pillar_points),
            ffn_dim: self.ffn_dim,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            queries: self.queries,
            lane_points: self.lane_points,
            loss: LossWeights {
                cls: self.loss_cls,
                pts: self.loss_pts,
                bnd: self.loss_bnd,
                background: self.loss_background,
            },
        })
    }
}
