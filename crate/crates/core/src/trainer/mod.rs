//! Training loop: seeded shuffling, per-scene forward/backward, global
//! gradient clipping, Adam updates, wall-time accounting, CSV loss log and
//! bit-exact checkpoint/resume.

mod adam;
mod checkpoint;
mod suite;

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, clip_grad_norm, AdamParams, AdamState};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};
pub use suite::{run_experiment_suite, SuiteRow, SuiteTable};

use crate::autodiff::Tape;
use crate::config::ExperimentConfig;
use crate::dataset::Scene;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport, SceneSegments};
use crate::heads_loss::LossBreakdown;
use crate::model::LaneSegModel;
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "step,epoch,loss_total,loss_cls,loss_pts,loss_bnd,wall_ms";
pub const EPOCH_LOG_FILE: &str = "epochs.csv";
pub const EPOCH_LOG_HEADER: &str = "epoch,steps,seconds,step_seconds,mean_loss";

/// The shuffle RNG uses its own ChaCha stream so it never aliases the
/// parameter-initialization stream seeded from the same value.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss_total: Scalar,
    pub breakdown: LossBreakdown,
    pub wall_ms: f64,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:.3}",
            self.step, self.epoch, self.loss_total, self.breakdown.cls, self.breakdown.pts, self.breakdown.bnd, self.wall_ms
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: u64,
    pub steps: usize,
    /// Wall time of the whole epoch.
    pub seconds: f64,
    /// Sum of the step times of the epoch.
    pub step_seconds: f64,
    pub mean_loss: Scalar,
}

impl EpochSummary {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:e}",
            self.epoch, self.steps, self.seconds, self.step_seconds, self.mean_loss
        )
    }
}

/// Step records and epoch summaries of one process lifetime.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainLog {
    fn push_step(&mut self, r: StepRecord) {
        debug_assert!(self.steps.last().map_or(true, |l| l.step < r.step), "steps must increase");
        self.steps.push(r);
    }

    pub fn losses(&self) -> Vec<Scalar> {
        self.steps.iter().map(|s| s.loss_total).collect()
    }

    pub fn mean_seconds_per_epoch(&self) -> f64 {
        if self.epochs.is_empty() {
            0.0
        } else {
            self.epochs.iter().map(|e| e.seconds).sum::<f64>() / self.epochs.len() as f64
        }
    }
}

/// State discarded on resume, to study loss jumps after a restart.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DropState {
    /// Restart Adam from zero moments and step 0.
    pub optimizer: bool,
    /// Reseed the shuffle RNG instead of continuing its stream.
    pub rng: bool,
}

pub struct Trainer {
    cfg: ExperimentConfig,
    hash: String,
    model: LaneSegModel,
    store: ParamStore,
    adam: AdamState,
    rng: ChaCha8Rng,
    epoch: u64,
    step: u64,
    wall_seconds: f64,
    log: TrainLog,
    out_dir: Option<PathBuf>,
}

fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM);
    rng
}

impl Trainer {
    /// Fresh model initialized from `cfg.seed`.
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let (model, store) = LaneSegModel::new(&cfg.model_config()?, cfg.seed)?;
        Ok(Self {
            cfg: cfg.clone(),
            hash: cfg.hash(),
            adam: AdamState::new(&store),
            model,
            store,
            rng: shuffle_rng(cfg.seed),
            epoch: 0,
            step: 0,
            wall_seconds: 0.0,
            log: TrainLog::default(),
            out_dir: None,
        })
    }

    /// Continues from `ckpt`; the config hash must match.
    pub fn from_checkpoint(cfg: &ExperimentConfig, ckpt: &Checkpoint, drop: DropState) -> Result<Self> {
        let hash = cfg.hash();
        if hash != ckpt.config_hash {
            return Err(Error::ConfigHashMismatch {
                checkpoint: ckpt.config_hash.clone(),
                config: hash,
            });
        }
        let mut t = Self::new(cfg)?;
        ckpt.restore_params(&mut t.store)?;
        if !drop.optimizer {
            t.adam = ckpt.adam.clone();
        }
        if !drop.rng {
            t.rng = ckpt.rng.restore();
        }
        t.epoch = ckpt.epoch;
        t.step = ckpt.step;
        t.wall_seconds = ckpt.wall_seconds;
        Ok(t)
    }

    /// Writes checkpoints and logs under `dir` from now on. A fresh run
    /// starts new log files; a resumed run keeps the rows up to its step
    /// and appends after them.
    pub fn write_to(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        std::fs::write(dir.join("config.txt"), self.cfg.to_text()).map_err(|e| Error::io(dir, e))?;
        truncate_log(&dir.join(LOG_FILE), LOG_HEADER, self.step)?;
        truncate_log(&dir.join(EPOCH_LOG_FILE), EPOCH_LOG_HEADER, self.epoch)?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(())
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn model(&self) -> &LaneSegModel {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.hash.clone(),
            epoch: self.epoch,
            step: self.step,
            wall_seconds: self.wall_seconds,
            rng: RngState::capture(&self.rng),
            params: self.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            adam: self.adam.clone(),
        }
    }

    fn hyper(&self) -> AdamParams {
        let warm = if self.cfg.warmup_steps > 0 {
            ((self.step + 1) as Scalar / self.cfg.warmup_steps as Scalar).min(1.0)
        } else {
            1.0
        };
        AdamParams {
            lr: self.cfg.lr * warm,
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            eps: self.cfg.eps,
            weight_decay: self.cfg.weight_decay,
        }
    }

    /// Loss and gradients of one scene, gradients in store order.
    fn scene_gradients(&self, scene: &Scene) -> Result<(Scalar, LossBreakdown, Vec<Tensor>)> {
        let non_finite = Error::NonFiniteLoss { step: self.step + 1 };
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &self.store);
        let loss = match self.model.scene_loss(&cx, scene) {
            Err(Error::NonFinite(_)) => return Err(non_finite),
            other => other?,
        };
        let value = loss.total.value().item()?;
        if !value.is_finite() {
            return Err(non_finite);
        }
        let grads = match tape.backward(loss.total) {
            Err(Error::NonFinite(_)) => return Err(non_finite),
            other => other?,
        };
        Ok((value, loss.breakdown, cx.collect_gradients(&grads)))
    }

    /// One optimizer step on a batch: gradients are averaged over scenes in
    /// scene-ID order, clipped, and applied.
    fn train_step(&mut self, batch: &mut Vec<&Scene>) -> Result<(Scalar, LossBreakdown)> {
        batch.sort_by(|a, b| a.id.cmp(&b.id));
        let scale = 1.0 / batch.len() as Scalar;
        let mut total = 0.0;
        let mut breakdown = LossBreakdown::default();
        let mut sum: Option<Vec<Tensor>> = None;
        for scene in batch.iter() {
            let (loss, parts, grads) = self.scene_gradients(scene)?;
            total += scale * loss;
            breakdown.cls += scale * parts.cls;
            breakdown.pts += scale * parts.pts;
            breakdown.bnd += scale * parts.bnd;
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let mut grads = sum.expect("non-empty batch");
        if batch.len() > 1 {
            grads = grads.iter().map(|g| g.map(|v| v * scale)).collect();
        }
        clip_grad_norm(&mut grads, self.cfg.grad_clip);
        let hp = self.hyper();
        adam_step(&mut self.store, &grads, &mut self.adam, &hp)?;
        Ok((total, breakdown))
    }

    /// Runs one epoch over `scenes` in a freshly shuffled order.
    pub fn train_epoch(&mut self, scenes: &[Scene]) -> Result<EpochSummary> {
        if scenes.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let started = Instant::now();
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut self.rng);
        let epoch = self.epoch + 1;
        let mut step_seconds = 0.0;
        let mut loss_sum = 0.0;
        let mut steps = 0;
        let mut log_file = match &self.out_dir {
            Some(dir) => Some(open_append(&dir.join(LOG_FILE))?),
            None => None,
        };
        for chunk in order.chunks(self.cfg.batch_size) {
            let step_start = Instant::now();
            let mut batch: Vec<&Scene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let (loss, breakdown) = self.train_step(&mut batch)?;
            let secs = step_start.elapsed().as_secs_f64();
            self.step += 1;
            step_seconds += secs;
            loss_sum += loss;
            steps += 1;
            let record = StepRecord {
                step: self.step,
                epoch,
                loss_total: loss,
                breakdown,
                wall_ms: secs * 1e3,
            };
            if let Some((file, path)) = &mut log_file {
                writeln!(file, "{}", record.csv_line()).map_err(|e| Error::io(&*path, e))?;
            }
            self.log.push_step(record);
        }
        self.epoch = epoch;
        let seconds = started.elapsed().as_secs_f64();
        self.wall_seconds += seconds;
        let summary = EpochSummary {
            epoch,
            steps,
            seconds,
            step_seconds,
            mean_loss: loss_sum / steps as Scalar,
        };
        self.log.epochs.push(summary);
        if let Some(dir) = &self.out_dir {
            let (mut file, path) = open_append(&dir.join(EPOCH_LOG_FILE))?;
            writeln!(file, "{}", summary.csv_line()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(summary)
    }

    /// Trains until `cfg.epochs` epochs are complete, saving a checkpoint
    /// every `checkpoint_every` epochs and after the last one (also when no
    /// epoch runs). `on_epoch` sees each summary as it completes.
    pub fn run(&mut self, scenes: &[Scene], mut on_epoch: impl FnMut(&EpochSummary)) -> Result<()> {
        if scenes.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        while self.epoch < self.cfg.epochs {
            let summary = self.train_epoch(scenes)?;
            on_epoch(&summary);
            let every = self.cfg.checkpoint_every;
            if every > 0 && self.epoch % every == 0 && self.epoch < self.cfg.epochs {
                self.save_checkpoint()?;
            }
        }
        self.save_checkpoint()?;
        Ok(())
    }

    /// Saves `ckpt_epoch_<n>.bin` in the output directory, if one is set.
    pub fn save_checkpoint(&self) -> Result<Option<PathBuf>> {
        match &self.out_dir {
            Some(dir) => {
                let path = dir.join(Checkpoint::file_name(self.epoch));
                self.checkpoint().save(&path)?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    }

    pub fn evaluate(&self, scenes: &[Scene], thresholds: &[Scalar]) -> Result<EvalReport> {
        evaluate_model(&self.model, &self.store, scenes, thresholds)
    }
}

fn open_append(path: &Path) -> Result<(File, PathBuf)> {
    let file = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok((file, path.to_path_buf()))
}

/// Rewrites a CSV log keeping the header and the rows whose first column is
/// at most `keep`; creates it when missing.
fn truncate_log(path: &Path, header: &str, keep: u64) -> Result<()> {
    let mut lines = vec![header.to_string()];
    if keep > 0 {
        if let Ok(file) = File::open(path) {
            for line in BufReader::new(file).lines().skip(1) {
                let line = line.map_err(|e| Error::io(path, e))?;
                let key: Option<u64> = line.split(',').next().and_then(|k| k.parse().ok());
                if key.is_some_and(|k| k <= keep) {
                    lines.push(line);
                }
            }
        }
    }
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Groundtruth of every frame of each scene.
pub fn groundtruth_segments(scenes: &[Scene]) -> Vec<SceneSegments> {
    scenes
        .iter()
        .map(|s| SceneSegments {
            scene_id: s.id.clone(),
            frames: s.frames.iter().map(|f| f.lanes.clone()).collect(),
        })
        .collect()
}

/// Final-layer predictions (every query, scored) for each scene.
pub fn predicted_segments(model: &LaneSegModel, store: &ParamStore, scenes: &[Scene]) -> Result<Vec<SceneSegments>> {
    scenes
        .iter()
        .map(|s| {
            let frames = model.predict(store, s)?;
            Ok(SceneSegments {
                scene_id: s.id.clone(),
                frames: frames
                    .into_iter()
                    .map(|f| f.into_iter().map(|p| p.segment).collect())
                    .collect(),
            })
        })
        .collect()
}

pub fn evaluate_model(model: &LaneSegModel, store: &ParamStore, scenes: &[Scene], thresholds: &[Scalar]) -> Result<EvalReport> {
    evaluate(&predicted_segments(model, store, scenes)?, &groundtruth_segments(scenes), thresholds)
}
