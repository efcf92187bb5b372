//! Backbone cost accounting and the configured layer structure of the
//! encoder/decoder presets.

use rand::seq::SliceRandom;

use laneseg_core::autodiff::Tape;
use laneseg_core::backbone::{count_flops, BackboneConfig};
use laneseg_core::dataset::{generate_dataset, GenParams};
use laneseg_core::geometry::EgoMotion;
use laneseg_core::lane_decoder::{self, LaneQuerySet};
use laneseg_core::nn::Ctx;
use laneseg_core::{bev_encoder, ExperimentConfig, LaneSegModel, Result, Tensor};

use crate::common::rng;
use crate::common::TestResult;
use crate::Outcome;

/// Multiply-accumulates quoted for the two reference backbones at 3×224×224.
const DEEP_MACS: f64 = 3.8e9;
const SHALLOW_MACS: f64 = 1.8e9;
const MACS_TOL: f64 = 0.15;
const RATIO_RANGE: (f64, f64) = (1.9, 2.3);

/// Presets with their (encoder, decoder) layer counts.
const LAYOUTS: [(&str, usize, usize); 3] = [("baseline-3:6", 3, 6), ("2:4", 2, 4), ("4:8", 4, 8)];
const EQUIVARIANCE_TOL: f64 = 1e-10;

pub fn flops() -> TestResult<Outcome> {
    let deep = count_flops(&BackboneConfig::resnet50_shape()).macs() as f64;
    let shallow = count_flops(&BackboneConfig::resnet18_shape()).macs() as f64;
    let ratio = deep / shallow;
    let passed = (deep / DEEP_MACS - 1.0).abs() <= MACS_TOL
        && (shallow / SHALLOW_MACS - 1.0).abs() <= MACS_TOL
        && (RATIO_RANGE.0..=RATIO_RANGE.1).contains(&ratio);
    Ok(Outcome {
        passed,
        detail: format!(
            "depth-50 {deep:.3e} MACs (ref {DEEP_MACS:e}), depth-18 {shallow:.3e} (ref {SHALLOW_MACS:e}), \
             tol ±{:.0}%, ratio {ratio:.3} in [{}, {}]",
            MACS_TOL * 100.0,
            RATIO_RANGE.0,
            RATIO_RANGE.1
        ),
    })
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let width = t.numel() / t.shape()[0];
    let data = perm
        .iter()
        .flat_map(|&r| t.data()[r * width..(r + 1) * width].iter().copied())
        .collect();
    Tensor::new(t.shape().to_vec(), data)
}

/// Checks one preset; returns a failure description or `None`.
fn check_layout(name: &str, encoder_layers: usize, decoder_layers: usize) -> Result<Option<String>> {
    let cfg = ExperimentConfig::preset(name)?;
    let (model, store) = LaneSegModel::new(&cfg.model_config()?, cfg.seed)?;
    let params = GenParams {
        frames: 1,
        ..GenParams::default()
    };
    let scene = generate_dataset(41, 1, &params).remove(0);
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let sampling = model.sampling(&scene.cameras)?;
    let out = model.frame(&cx, &scene.frames[0], &sampling, None, &EgoMotion::identity())?;

    let counts = [
        (bev_encoder::EVENT_TSA, encoder_layers),
        (bev_encoder::EVENT_SCA, encoder_layers),
        (bev_encoder::EVENT_FFN, encoder_layers),
        (lane_decoder::EVENT_SELF_ATTN, decoder_layers),
        (lane_decoder::EVENT_CROSS_ATTN, decoder_layers),
        (lane_decoder::EVENT_FFN, decoder_layers),
    ];
    for (event, expected) in counts {
        let got = tape.event_count(event);
        if got != expected {
            return Ok(Some(format!("{name}: {event} ran {got} times, expected {expected}")));
        }
    }
    if out.layers.len() != decoder_layers {
        return Ok(Some(format!("{name}: {} head outputs", out.layers.len())));
    }

    // Decoding a permuted query set must permute every layer's output.
    let bev = cx.constant((*out.bev.value()).clone());
    let (q0, pos) = model.decoder.initial_queries(&cx);
    let mut perm: Vec<usize> = (0..q0.len()).collect();
    perm.shuffle(&mut rng(42));
    let permuted = LaneQuerySet {
        embed: cx.constant(permute_rows(&q0.embed.value(), &perm)?),
        ref_logits: cx.constant(permute_rows(&q0.ref_logits.value(), &perm)?),
    };
    let permuted_pos = cx.constant(permute_rows(&pos.value(), &perm)?);
    let plain = model.decoder.decode_from(&cx, q0, pos, bev, &model.cfg.geometry)?;
    let shuffled = model.decoder.decode_from(&cx, permuted, permuted_pos, bev, &model.cfg.geometry)?;
    let mut worst: f64 = 0.0;
    for (a, b) in plain.iter().zip(&shuffled) {
        for (x, y) in [(a.embed, b.embed), (a.ref_logits, b.ref_logits)] {
            worst = worst.max(permute_rows(&x.value(), &perm)?.max_abs_diff(&y.value()));
        }
    }
    if !(worst <= EQUIVARIANCE_TOL) {
        return Ok(Some(format!("{name}: permuted decoding differs by {worst:.2e}")));
    }

    for (layer, q) in plain.iter().chain(&shuffled).enumerate() {
        let refs = q.reference_points();
        if !refs.data().iter().all(|&v| v > 0.0 && v < 1.0) {
            return Ok(Some(format!("{name}: decoder layer {layer} has reference points outside (0,1)²")));
        }
    }
    Ok(None)
}

pub fn architecture() -> TestResult<Outcome> {
    let mut failures = Vec::new();
    for (name, enc, dec) in LAYOUTS {
        if let Some(f) = check_layout(name, enc, dec)? {
            failures.push(f);
        }
    }
    let detail = if failures.is_empty() {
        format!(
            "layer event counts match (3,6), (2,4), (4,8); decoder permutation-equivariant (tol {EQUIVARIANCE_TOL:e}); \
             reference points inside (0,1)²"
        )
    } else {
        failures.join("; ")
    };
    Ok(Outcome {
        passed: failures.is_empty(),
        detail,
    })
}
