use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tape;
use crate::geometry::{BevExtent, Camera, Intrinsics};
use crate::nn::ParamStore;

fn tiny_cfg(layers: usize) -> EncoderConfig {
    EncoderConfig {
        geometry: BevGeometry {
            rows: 5,
            cols: 4,
            extent: BevExtent {
                x_min: -10.0,
                x_max: 10.0,
                y_min: -8.0,
                y_max: 8.0,
            },
        },
        dim: 8,
        heads: 2,
        points: 2,
        pillar_heights: vec![0.0, 1.0],
        ffn_dim: 16,
        layers,
        feature_channels: 3,
    }
}

/// Forward-looking and left-looking cameras; the rear-right of the grid is
/// unseen.
fn cameras() -> Vec<Camera> {
    let k = Intrinsics {
        fx: 30.0,
        fy: 30.0,
        cx: 48.0,
        cy: 32.0,
    };
    vec![
        Camera::mounted(k, 96, 64, [0.0, 0.0, 2.0], 0.0, 0.25),
        Camera::mounted(k, 96, 64, [0.0, 0.0, 2.0], 1.4, 0.25),
    ]
}

fn features(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![2, 3, 4, 6], |_| rng.gen_range(-1.0..1.0))
}

fn build(cfg: &EncoderConfig) -> (ParamStore, BevEncoder) {
    let mut store = ParamStore::new();
    let enc = {
        let mut init = Initializer::new(&mut store, ChaCha8Rng::seed_from_u64(4));
        BevEncoder::new(&mut init, cfg).unwrap()
    };
    (store, enc)
}

fn sampling(cfg: &EncoderConfig) -> SpatialSampling {
    SpatialSampling::new(&cfg.geometry, &cameras(), &cfg.pillar_heights).unwrap()
}

fn history(cfg: &EncoderConfig) -> Tensor {
    Tensor::from_fn(vec![cfg.geometry.num_cells(), cfg.dim], |i| (i as f64 * 0.21).cos())
}

#[test]
fn layer_count_drives_sub_block_applications() {
    for layers in [2, 3, 4] {
        let cfg = tiny_cfg(layers);
        let (store, enc) = build(&cfg);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let motion = EgoMotion {
            dx: 0.5,
            dy: 0.0,
            dyaw: 0.01,
        };
        let out = enc
            .encode(&cx, cx.constant(features(1)), &sampling(&cfg), Some(&history(&cfg)), &motion)
            .unwrap();
        assert_eq!(out.shape(), vec![20, 8]);
        for ev in [EVENT_TSA, EVENT_SCA, EVENT_FFN] {
            assert_eq!(tape.event_count(ev), layers, "{ev}");
        }
    }
}

#[test]
fn forward_cost_is_linear_in_depth() {
    let cost = |layers| {
        let cfg = tiny_cfg(layers);
        let (store, enc) = build(&cfg);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        enc.encode(&cx, cx.constant(features(1)), &sampling(&cfg), Some(&history(&cfg)), &EgoMotion::identity())
            .unwrap();
        tape.flops() as f64
    };
    let ratio = cost(2) / cost(4);
    assert!((ratio - 0.5).abs() < 0.02, "{ratio}");
}

#[test]
fn encoding_is_deterministic() {
    let cfg = tiny_cfg(2);
    let run = || {
        let (store, enc) = build(&cfg);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        enc.encode(&cx, cx.constant(features(2)), &sampling(&cfg), None, &EgoMotion::identity())
            .unwrap()
            .value()
            .data()
            .to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn unseen_cells_pass_through_cross_attention() {
    let cfg = tiny_cfg(1);
    let (store, enc) = build(&cfg);
    let s = sampling(&cfg);
    assert!(s.hit_counts.iter().any(|&c| c == 0), "fixture needs unseen cells");
    assert!(s.hit_counts.iter().any(|&c| c > 0));
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let bev = cx.constant(history(&cfg));
    let tokens = pv_tokens(cx.constant(features(3))).unwrap();
    let out = enc.layers[0]
        .spatial_cross_attention(&cx, bev, cx.param(enc.pos), tokens, (4, 6), &s)
        .unwrap()
        .value();
    let input = bev.value();
    for (cell, &c) in s.hit_counts.iter().enumerate() {
        let row = cell * 8..(cell + 1) * 8;
        if c == 0 {
            assert_eq!(&out.data()[row.clone()], &input.data()[row]);
        } else {
            assert_ne!(&out.data()[row.clone()], &input.data()[row]);
        }
    }
}

#[test]
fn hit_masks_ignore_feature_values() {
    let cfg = tiny_cfg(1);
    let a = sampling(&cfg);
    let b = SpatialSampling::new(&cfg.geometry, &cameras(), &cfg.pillar_heights).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mismatched_history_is_dimension_error() {
    let cfg = tiny_cfg(1);
    let (store, enc) = build(&cfg);
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let bad = Tensor::zeros(vec![7, 8]);
    let err = enc
        .encode(&cx, cx.constant(features(1)), &sampling(&cfg), Some(&bad), &EgoMotion::identity())
        .unwrap_err();
    assert!(matches!(err, Error::Dimension(_)));
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = tiny_cfg(1);
    let (mut store, enc) = build(&cfg);
    // Move away from the zero-initialized offset/logit weights so every path
    // carries gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for id in [enc.layers[0].tsa.offsets.weight, enc.layers[0].sca.offsets.weight, enc.layers[0].sca.logits.weight] {
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    let s = sampling(&cfg);
    let feats = features(5);
    let hist = history(&cfg);
    let motion = EgoMotion {
        dx: 0.3,
        dy: 0.1,
        dyaw: 0.02,
    };
    let loss = |store: &ParamStore| -> (f64, Vec<Tensor>) {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store);
        let out = enc.encode(&cx, cx.constant(feats.clone()), &s, Some(&hist), &motion).unwrap();
        let w = Tensor::from_fn(out.shape(), |i| ((i as f64) * 0.37).sin());
        let l = out.mul(cx.constant(w)).unwrap().sum().unwrap();
        let value = l.item().unwrap();
        let grads = tape.backward(l).unwrap();
        (value, cx.collect_gradients(&grads))
    };
    let (_, grads) = loss(&store);
    let h = 1e-5;
    let mut checked = 0;
    for id in store.clone().ids() {
        let numel = store.get(id).numel();
        for j in [0, numel / 2, numel - 1] {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + h;
            let plus = loss(&store).0;
            store.get_mut(id).data_mut()[j] = orig - h;
            let minus = loss(&store).0;
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads[id.index()].data()[j];
            let scale = numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (numeric - analytic).abs() / scale < 1e-4,
                "{}[{j}]: analytic {analytic} numeric {numeric}",
                store.name(id)
            );
            checked += 1;
        }
    }
    assert!(checked > 40);
}
