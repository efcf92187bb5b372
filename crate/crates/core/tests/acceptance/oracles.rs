//! Library results against independent brute-force or dense formulations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use laneseg_core::autodiff::Tape;
use laneseg_core::bev_encoder::DeformAttention;
use laneseg_core::evaluation::chamfer_distance;
use laneseg_core::geometry::{Camera, Intrinsics, Vec2, Vec3};
use laneseg_core::heads_loss::hungarian_match;
use laneseg_core::lane_decoder::MultiHeadAttention;
use laneseg_core::nn::{Ctx, Initializer, Linear, ParamStore};
use laneseg_core::{Result, Tensor};

use crate::common::{rel_err, rng, uniform};
use crate::common::TestResult;
use crate::Outcome;

const MATCH_MAX: usize = 7;
const MATCH_PER_SIZE: usize = 40;
/// Tolerance for real-valued assignment costs summed in different orders;
/// integer-valued matrices must agree exactly.
const MATCH_TOL: f64 = 1e-12;
const ATTENTION_TOL: f64 = 1e-10;
const ATTENTION_CASES: usize = 50;
const CHAMFER_CASES: usize = 2000;
const PROJECTION_CASES: usize = 20000;

fn brute_force_assignment(cost: &[Vec<f64>], row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
    if row == cost.len() {
        if acc < *best {
            *best = acc;
        }
        return;
    }
    for col in 0..used.len() {
        if !used[col] {
            used[col] = true;
            brute_force_assignment(cost, row + 1, used, acc + cost[row][col], best);
            used[col] = false;
        }
    }
}

fn hungarian(rng: &mut ChaCha8Rng) -> Result<(usize, Vec<String>)> {
    let mut failures = Vec::new();
    let mut count = 0;
    for rows in 1..=MATCH_MAX {
        for cols in rows..=MATCH_MAX {
            for case in 0..MATCH_PER_SIZE {
                let integer = case % 2 == 0;
                let cost: Vec<Vec<f64>> = (0..rows)
                    .map(|_| {
                        (0..cols)
                            .map(|_| {
                                if integer {
                                    rng.gen_range(0..10) as f64
                                } else {
                                    rng.gen_range(-5.0..5.0)
                                }
                            })
                            .collect()
                    })
                    .collect();
                let flat = Tensor::new(vec![rows, cols], cost.concat())?;
                let result = hungarian_match(&flat)?;
                let mut best = f64::INFINITY;
                brute_force_assignment(&cost, 0, &mut vec![false; cols], 0.0, &mut best);

                let mut seen = vec![false; cols];
                let injective = result.assignment.len() == rows
                    && result.assignment.iter().all(|&c| c < cols && !std::mem::replace(&mut seen[c], true));
                let recomputed: f64 = if injective {
                    result.assignment.iter().enumerate().map(|(r, &c)| cost[r][c]).sum()
                } else {
                    f64::NAN
                };
                let tol = if integer { 0.0 } else { MATCH_TOL * (1.0 + best.abs()) };
                let agrees = (recomputed - best).abs() <= tol && (result.total_cost - best).abs() <= tol;
                if !agrees {
                    failures.push(format!("{rows}x{cols}: got {recomputed} / {}, exhaustive {best}", result.total_cost));
                }
                count += 1;
            }
        }
    }
    Ok((count, failures))
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
}

/// `x · W + b` for one row, reading the parameters directly.
fn dense(store: &ParamStore, layer: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.get(layer.weight);
    (0..layer.out_dim)
        .map(|o| {
            let b = layer.bias.map_or(0.0, |id| store.get(id).data()[o]);
            b + (0..layer.in_dim).map(|i| x[i] * w.get(&[i, o])).sum::<f64>()
        })
        .collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

/// Zero-padded bilinear read of channel `ch` of a row-major `[h·w, C]` map
/// at normalized `(u, v)`; points outside the unit square read zero.
fn bilinear(map: &[Vec<f64>], h: usize, w: usize, ch: usize, u: f64, v: f64) -> f64 {
    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
        return 0.0;
    }
    let (x, y) = (u * w as f64 - 0.5, v * h as f64 - 0.5);
    let mut total = 0.0;
    for row in [y.floor(), y.floor() + 1.0] {
        for col in [x.floor(), x.floor() + 1.0] {
            if row < 0.0 || col < 0.0 || row >= h as f64 || col >= w as f64 {
                continue;
            }
            let weight = (1.0 - (x - col).abs()) * (1.0 - (y - row).abs());
            total += weight * map[row as usize * w + col as usize][ch];
        }
    }
    total
}

fn deformable_attention(seed: u64) -> Result<f64> {
    let mut rng = rng(seed);
    let (dim, value_dim) = (8, 6);
    let heads = rng.gen_range(1..=2) * 2;
    let (levels, points) = (2, rng.gen_range(1..=3));
    let level_dims = [(rng.gen_range(2..=5), rng.gen_range(2..=5)), (rng.gen_range(1..=3), rng.gen_range(1..=3))];
    let mut store = ParamStore::new();
    let attn = {
        let mut init = Initializer::new(&mut store, ChaCha8Rng::seed_from_u64(seed));
        DeformAttention::new(&mut init, "attn", dim, value_dim, heads, levels, points)?
    };
    randomize(&mut store, &mut rng);
    let n = rng.gen_range(1..=5);
    let queries = uniform(&mut rng, &[n, dim], -1.0, 1.0);
    let refs = uniform(&mut rng, &[n, 2], 0.05, 0.95);
    let tokens: usize = level_dims.iter().map(|(h, w)| h * w).sum();
    let values = uniform(&mut rng, &[tokens, value_dim], -1.0, 1.0);

    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let got = attn.forward(&cx, cx.constant(queries.clone()), &refs, cx.constant(values.clone()), &level_dims)?;

    let projected: Vec<Vec<f64>> = values.data().chunks(value_dim).map(|r| dense(&store, &attn.value_proj, r)).collect();
    let head_dim = dim / heads;
    let mut expected = Vec::new();
    for (q, query) in queries.data().chunks(dim).enumerate() {
        let offsets = dense(&store, &attn.offsets, query);
        let logits = dense(&store, &attn.logits, query);
        let mut mixed = vec![0.0; dim];
        for head in 0..heads {
            let span = levels * points;
            let weights = softmax(&logits[head * span..(head + 1) * span]);
            let mut start = 0;
            for (level, &(h, w)) in level_dims.iter().enumerate() {
                let map = &projected[start..start + h * w];
                for p in 0..points {
                    let slot = (head * levels + level) * points + p;
                    let u = refs.get(&[q, 0]) + offsets[2 * slot] / w as f64;
                    let v = refs.get(&[q, 1]) + offsets[2 * slot + 1] / h as f64;
                    for c in 0..head_dim {
                        let ch = head * head_dim + c;
                        mixed[ch] += weights[level * points + p] * bilinear(map, h, w, ch, u, v);
                    }
                }
                start += h * w;
            }
        }
        expected.extend(dense(&store, &attn.out_proj, &mixed));
    }
    Ok(rel_err(got.value().data(), &expected))
}

fn multi_head_attention(seed: u64) -> Result<f64> {
    let mut rng = rng(seed);
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    let dim = 8;
    let mut store = ParamStore::new();
    let attn = {
        let mut init = Initializer::new(&mut store, ChaCha8Rng::seed_from_u64(seed));
        MultiHeadAttention::new(&mut init, "mha", dim, heads)?
    };
    randomize(&mut store, &mut rng);
    let (nq, nk) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
    let q_in = uniform(&mut rng, &[nq, dim], -1.0, 1.0);
    // Half the cases are self-attention.
    let k_in = if seed % 2 == 0 { q_in.clone() } else { uniform(&mut rng, &[nk, dim], -1.0, 1.0) };
    let v_in = if seed % 2 == 0 { q_in.clone() } else { uniform(&mut rng, &[nk, dim], -1.0, 1.0) };

    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let got = attn.forward(&cx, cx.constant(q_in.clone()), cx.constant(k_in.clone()), cx.constant(v_in.clone()))?;

    let q: Vec<Vec<f64>> = q_in.data().chunks(dim).map(|r| dense(&store, &attn.query, r)).collect();
    let k: Vec<Vec<f64>> = k_in.data().chunks(dim).map(|r| dense(&store, &attn.key, r)).collect();
    let v: Vec<Vec<f64>> = v_in.data().chunks(dim).map(|r| dense(&store, &attn.value, r)).collect();
    let head_dim = dim / heads;
    let mut expected = Vec::new();
    for qi in &q {
        let mut mixed = vec![0.0; dim];
        for head in 0..heads {
            let block = head * head_dim..(head + 1) * head_dim;
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| block.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (head_dim as f64).sqrt())
                .collect();
            for (a, vj) in softmax(&scores).iter().zip(&v) {
                for c in block.clone() {
                    mixed[c] += a * vj[c];
                }
            }
        }
        expected.extend(dense(&store, &attn.out, &mixed));
    }
    Ok(rel_err(got.value().data(), &expected))
}

fn chamfer_reference(a: &[Vec2], b: &[Vec2]) -> f64 {
    let directed = |from: &[Vec2], to: &[Vec2]| {
        let mut total = 0.0;
        for p in from {
            let mut best = f64::INFINITY;
            for q in to {
                let (dx, dy) = (p[0] - q[0], p[1] - q[1]);
                let d = (dx * dx + dy * dy).sqrt();
                if d < best {
                    best = d;
                }
            }
            total += best;
        }
        total / from.len() as f64
    };
    0.5 * (directed(a, b) + directed(b, a))
}

fn chamfer(rng: &mut ChaCha8Rng) -> Result<usize> {
    let mut mismatches = 0;
    let polyline = |rng: &mut ChaCha8Rng| -> Vec<Vec2> {
        (0..rng.gen_range(1..=12))
            .map(|_| [rng.gen_range(-30.0..30.0), rng.gen_range(-15.0..15.0)])
            .collect()
    };
    for _ in 0..CHAMFER_CASES {
        let (a, b) = (polyline(rng), polyline(rng));
        if chamfer_distance(&a, &b)?.to_bits() != chamfer_reference(&a, &b).to_bits() {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

/// Pinhole projection recomputed from the camera's rotation, translation
/// and intrinsics.
fn project_reference(cam: &Camera, p: Vec3) -> Option<Vec2> {
    let d = [p[0] - cam.translation[0], p[1] - cam.translation[1], p[2] - cam.translation[2]];
    let mut c = [0.0; 3];
    for (axis, out) in c.iter_mut().enumerate() {
        *out = cam.rotation[0][axis] * d[0] + cam.rotation[1][axis] * d[1] + cam.rotation[2][axis] * d[2];
    }
    if c[2] <= 0.0 {
        return None;
    }
    let k = &cam.intrinsics;
    let u = k.fx * c[0] / c[2] + k.cx;
    let v = k.fy * c[1] / c[2] + k.cy;
    if u < 0.0 || v < 0.0 || u >= cam.width as f64 || v >= cam.height as f64 {
        return None;
    }
    Some([u, v])
}

fn projection(rng: &mut ChaCha8Rng) -> usize {
    let mut mismatches = 0;
    for i in 0..PROJECTION_CASES {
        let cam = Camera::mounted(
            Intrinsics {
                fx: rng.gen_range(30.0..120.0),
                fy: rng.gen_range(30.0..120.0),
                cx: rng.gen_range(20.0..70.0),
                cy: rng.gen_range(20.0..45.0),
            },
            96,
            64,
            [rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0), rng.gen_range(1.0..2.5)],
            rng.gen_range(-3.2..3.2),
            rng.gen_range(0.0..0.4),
        );
        // Every other point is aimed through the image so both branches run.
        let p = if i % 2 == 0 {
            let ray = cam.ray(rng.gen_range(0.0..96.0), rng.gen_range(0.0..64.0));
            let t = rng.gen_range(0.5..40.0);
            [
                cam.translation[0] + t * ray[0],
                cam.translation[1] + t * ray[1],
                cam.translation[2] + t * ray[2],
            ]
        } else {
            [rng.gen_range(-40.0..40.0), rng.gen_range(-20.0..20.0), rng.gen_range(-1.0..4.0)]
        };
        let got = cam.project(p).map(|uv| uv.map(f64::to_bits));
        if got != project_reference(&cam, p).map(|uv| uv.map(f64::to_bits)) {
            mismatches += 1;
        }
    }
    mismatches
}

pub fn suite() -> TestResult<Outcome> {
    let (matrices, match_failures) = hungarian(&mut rng(31))?;
    let mut deform_worst: f64 = 0.0;
    let mut mha_worst: f64 = 0.0;
    for seed in 0..ATTENTION_CASES as u64 {
        deform_worst = deform_worst.max(deformable_attention(1000 + seed)?);
        mha_worst = mha_worst.max(multi_head_attention(2000 + seed)?);
    }
    let chamfer_mismatches = chamfer(&mut rng(33))?;
    let projection_mismatches = projection(&mut rng(34));

    let passed = match_failures.is_empty()
        && deform_worst < ATTENTION_TOL
        && mha_worst < ATTENTION_TOL
        && chamfer_mismatches == 0
        && projection_mismatches == 0;
    let mut detail = format!(
        "hungarian {matrices} matrices <= {MATCH_MAX}x{MATCH_MAX} ({} mismatches); deformable attn rel err {deform_worst:.1e}, \
         multi-head attn {mha_worst:.1e} (tol {ATTENTION_TOL:e}); chamfer {chamfer_mismatches}/{CHAMFER_CASES} and \
         projection {projection_mismatches}/{PROJECTION_CASES} inexact",
        match_failures.len()
    );
    if let Some(first) = match_failures.first() {
        detail.push_str(&format!("; first mismatch {first}"));
    }
    Ok(Outcome { passed, detail })
}
