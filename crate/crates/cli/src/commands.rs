use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use laneseg_core::backbone::{count_flops, BackboneConfig};
use laneseg_core::config::{ExperimentConfig, PRESETS};
use laneseg_core::dataset::{generate_dataset, generate_split, load_dataset, save_dataset, GenParams, Scene};
use laneseg_core::evaluation::{evaluate, SceneSegments, DEFAULT_THRESHOLDS};
use laneseg_core::geometry::BevExtent;
use laneseg_core::heads_loss::LaneSegment;
use laneseg_core::nn::ParamStore;
use laneseg_core::trainer::{
    groundtruth_segments, predicted_segments, run_experiment_suite, Checkpoint, DropState, Trainer,
};
use laneseg_core::{Error, LaneSegModel};

use crate::svg::{render_bev, MIN_SCORE};
use crate::{ConfigArgs, EvalArgs, FlopsArgs, GenDataArgs, ResumeArgs, SuiteArgs, TrainArgs, UsageError, VizArgs};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Config errors are usage errors; I/O failures stay runtime errors.
fn config_error(e: Error) -> anyhow::Error {
    match e {
        Error::Io { .. } => e.into(),
        other => usage(other.to_string()),
    }
}

/// Preset, then the config file (or `fallback` when neither a preset nor a
/// file is given and it exists), then `--set` overrides.
fn resolve_config(args: &ConfigArgs, fallback: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::preset(args.preset.as_deref().unwrap_or(PRESETS[0])).map_err(config_error)?;
    let file = match (&args.config, &args.preset) {
        (Some(f), _) => Some(f.clone()),
        (None, None) => fallback.filter(|f| f.is_file()).map(Path::to_path_buf),
        (None, Some(_)) => None,
    };
    if let Some(f) = file {
        cfg.apply_file(&f).map_err(config_error)?;
    }
    cfg.apply_overrides(&args.set).map_err(config_error)?;
    cfg.validate().map_err(config_error)?;
    Ok(cfg)
}

fn print_config(cfg: &ExperimentConfig) {
    println!("# resolved config (hash {})", cfg.hash());
    print!("{}", cfg.to_text());
    println!("# end config");
}

fn print_settings(entries: &[(&str, String)]) {
    println!("# resolved config");
    for (k, v) in entries {
        println!("{k} = {v}");
    }
    println!("# end config");
}

fn saved_config(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint.parent().map(|d| d.join("config.txt"))
}

fn load_scenes(dir: &Path) -> Result<Vec<Scene>> {
    let scenes = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if scenes.is_empty() {
        bail!("dataset {} has no scenes", dir.display());
    }
    Ok(scenes)
}

fn write_output(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_model(checkpoint: &Path, args: &ConfigArgs) -> Result<(ExperimentConfig, LaneSegModel, ParamStore)> {
    let cfg = resolve_config(args, saved_config(checkpoint).as_deref())?;
    let (model, mut store) = LaneSegModel::new(&cfg.model_config()?, cfg.seed)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.restore_params(&mut store)
        .with_context(|| format!("checkpoint {} does not fit the configured model", checkpoint.display()))?;
    Ok((cfg, model, store))
}

fn oracle(gt: &[SceneSegments]) -> Vec<SceneSegments> {
    let mut preds = gt.to_vec();
    for frame in preds.iter_mut().flat_map(|s| s.frames.iter_mut()) {
        for lane in frame.iter_mut() {
            lane.score = 1.0;
        }
    }
    preds
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    if a.scenes == 0 {
        return Err(usage("--scenes must be at least 1"));
    }
    if a.frames == 0 {
        return Err(usage("--frames must be at least 1"));
    }
    let split = match &a.split {
        Some(s) => {
            let parsed = s
                .split_once(':')
                .and_then(|(t, e)| Some((t.trim().parse::<usize>().ok()?, e.trim().parse::<usize>().ok()?)));
            match parsed {
                Some((train, test)) if train > 0 && test > 0 && train + test == a.scenes => Some((train, test)),
                _ => {
                    return Err(usage(format!(
                        "--split `{s}` must be TRAIN:TEST with positive parts summing to --scenes ({})",
                        a.scenes
                    )))
                }
            }
        }
        None => None,
    };
    let params = GenParams {
        frames: a.frames,
        ..GenParams::default()
    };
    print_settings(&[
        ("seed", a.seed.to_string()),
        ("scenes", a.scenes.to_string()),
        ("split", a.split.clone().unwrap_or_else(|| "none".into())),
        ("frames", params.frames.to_string()),
        ("width", params.width.to_string()),
        ("height", params.height.to_string()),
        ("points", params.points.to_string()),
        ("out", a.out.display().to_string()),
    ]);
    match split {
        Some((train, test)) => {
            let (tr, te) = generate_split(a.seed, train, test, &params);
            save_dataset(&tr, &a.out.join("train"))?;
            save_dataset(&te, &a.out.join("test"))?;
            println!("wrote {train} training and {test} test scenes to {}", a.out.display());
        }
        None => {
            save_dataset(&generate_dataset(a.seed, a.scenes, &params), &a.out)?;
            println!("wrote {} scenes to {}", a.scenes, a.out.display());
        }
    }
    Ok(())
}

fn run_training(trainer: &mut Trainer, scenes: &[Scene]) -> Result<()> {
    let total = trainer.config().epochs;
    trainer.run(scenes, |e| {
        println!(
            "epoch {}/{}: {} steps, mean loss {:.6}, {:.2} s",
            e.epoch, total, e.steps, e.mean_loss, e.seconds
        );
    })?;
    println!(
        "checkpoint: {}",
        trainer.config().checkpoint_dir.join(Checkpoint::file_name(trainer.epoch())).display()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.config, None)?;
    if let Some(d) = a.dataset {
        cfg.dataset_dir = d;
    }
    if let Some(o) = a.out {
        cfg.checkpoint_dir = o;
    }
    print_config(&cfg);
    let scenes = load_scenes(&cfg.dataset_dir)?;
    let mut trainer = Trainer::new(&cfg)?;
    trainer.write_to(&cfg.checkpoint_dir)?;
    run_training(&mut trainer, &scenes)
}

pub fn resume(a: ResumeArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.config, saved_config(&a.checkpoint).as_deref())?;
    if let Some(d) = a.dataset {
        cfg.dataset_dir = d;
    }
    cfg.checkpoint_dir = match a.out {
        Some(o) => o,
        None => a
            .checkpoint
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    print_config(&cfg);
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let drop = DropState {
        optimizer: a.drop_optimizer_state,
        rng: a.drop_rng_state,
    };
    let mut trainer = Trainer::from_checkpoint(&cfg, &ckpt, drop)?;
    println!(
        "resuming from epoch {} (step {}){}{}",
        ckpt.epoch,
        ckpt.step,
        if drop.optimizer { ", optimizer state dropped" } else { "" },
        if drop.rng { ", RNG state dropped" } else { "" }
    );
    let scenes = load_scenes(&cfg.dataset_dir)?;
    trainer.write_to(&cfg.checkpoint_dir)?;
    run_training(&mut trainer, &scenes)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let scenes = load_scenes(&a.dataset)?;
    let gt = groundtruth_segments(&scenes);
    let preds = match &a.checkpoint {
        Some(path) => {
            let (cfg, model, store) = load_model(path, &a.config)?;
            print_config(&cfg);
            predicted_segments(&model, &store, &scenes)?
        }
        None => {
            print_settings(&[
                ("dataset", a.dataset.display().to_string()),
                ("oracle", "true".into()),
                ("out", a.out.display().to_string()),
            ]);
            oracle(&gt)
        }
    };
    let report = evaluate(&preds, &gt, &DEFAULT_THRESHOLDS)?;
    let text = report.to_text();
    print!("{text}");
    write_output(&a.out, &text)?;
    println!("report: {}", a.out.display());
    Ok(())
}

pub fn flops(a: FlopsArgs) -> Result<()> {
    let cfg = BackboneConfig::preset(&a.preset).map_err(config_error)?;
    print_settings(&[
        ("preset", a.preset.clone()),
        ("input", format!("{:?}", cfg.input_shape)),
    ]);
    let report = count_flops(&cfg);
    println!("{:<28} {:>16}", "layer", "MACs");
    for layer in &report.layers {
        println!("{:<28} {:>16}", layer.name, layer.macs);
    }
    println!("total MACs  = {} ({:.3e})", report.macs(), report.macs() as f64);
    println!("total FLOPs = {} ({:.3e}, 2 per MAC)", report.flops(), report.flops() as f64);
    let deep = count_flops(&BackboneConfig::resnet50_shape()).macs() as f64;
    let shallow = count_flops(&BackboneConfig::resnet18_shape()).macs() as f64;
    println!("ratio resnet50-shape / resnet18-shape = {:.3}", deep / shallow);
    Ok(())
}

pub fn suite(a: SuiteArgs) -> Result<()> {
    let presets: Vec<&str> = if a.presets.is_empty() {
        PRESETS.to_vec()
    } else {
        a.presets.iter().map(String::as_str).collect()
    };
    for &name in &presets {
        let mut cfg = ExperimentConfig::preset(name).map_err(config_error)?;
        cfg.apply_overrides(&a.set).map_err(config_error)?;
        cfg.validate().map_err(config_error)?;
        println!("# preset {name}");
        print_config(&cfg);
    }
    let train = load_scenes(&a.train)?;
    let test = load_scenes(&a.test)?;
    let table = run_experiment_suite(&presets, &a.set, &train, &test, Some(&a.out), |name, e| {
        println!("{name} epoch {}: mean loss {:.6}, {:.2} s", e.epoch, e.mean_loss, e.seconds);
    })?;
    let text = table.to_text();
    print!("{text}");
    write_output(&a.out.join("suite.txt"), &text)?;
    Ok(())
}

pub fn viz(a: VizArgs) -> Result<()> {
    let scenes = load_scenes(&a.dataset)?;
    let Some(scene) = scenes.iter().find(|s| s.id == a.scene) else {
        let ids: Vec<&str> = scenes.iter().map(|s| s.id.as_str()).collect();
        bail!("scene `{}` not found in {}; available scenes: {}", a.scene, a.dataset.display(), ids.join(", "));
    };
    let frame = a.frame.unwrap_or(scene.frames.len() - 1);
    if frame >= scene.frames.len() {
        return Err(usage(format!("--frame {frame} out of range; scene has {} frames", scene.frames.len())));
    }
    let gt: &[LaneSegment] = &scene.frames[frame].lanes;
    let predicted: Option<Vec<LaneSegment>> = match &a.checkpoint {
        Some(path) => {
            let (cfg, model, store) = load_model(path, &a.config)?;
            print_config(&cfg);
            let frames = model.predict(&store, scene)?;
            Some(frames[frame].iter().map(|p| p.segment.clone()).collect())
        }
        None => {
            print_settings(&[
                ("dataset", a.dataset.display().to_string()),
                ("scene", a.scene.clone()),
                ("frame", frame.to_string()),
                ("oracle", a.oracle.to_string()),
                ("out", a.out.display().to_string()),
            ]);
            a.oracle.then(|| gt.to_vec())
        }
    };
    let shown: Option<Vec<LaneSegment>> =
        predicted.map(|p| p.into_iter().filter(|l| l.score >= MIN_SCORE).collect());
    let title = format!("{} frame {}", scene.id, frame);
    let svg = render_bev(gt, shown.as_deref(), &BevExtent::default(), &title);
    write_output(&a.out, &svg)?;
    println!(
        "wrote {} ({} groundtruth segments{})",
        a.out.display(),
        gt.len(),
        shown.map_or(String::new(), |p| format!(", {} predicted with score >= {MIN_SCORE}", p.len()))
    );
    Ok(())
}
