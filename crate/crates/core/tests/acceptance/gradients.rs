//! Finite-difference checks of every differentiable tape operation on
//! randomized shapes and values. Inputs stay clear of kinks (relu/abs at 0,
//! max-pool ties, bilinear cell borders) by more than the difference step.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use laneseg_core::autodiff::gradcheck::check_gradients;
use laneseg_core::autodiff::{self, Tape, Var};
use laneseg_core::{Result, Tensor};

use crate::common::{rng, uniform};
use crate::common::TestResult;
use crate::Outcome;

const CASES: usize = 100;
const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const TOL_COORDS: f64 = 1e-3;
/// Minimum distance of relu/abs inputs from zero.
const KINK_GAP: f64 = 0.05;
/// Minimum distance of bilinear pixel coordinates from integers.
const CELL_GAP: f64 = 0.03;

#[derive(Default)]
struct Suite {
    /// Per operation: cases, worst relative error, tolerance.
    ops: BTreeMap<String, (usize, f64, f64)>,
}

impl Suite {
    fn check<F>(&mut self, op: &str, tol: f64, inputs: &[Tensor], wrt: &[bool], f: F) -> Result<()>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let err = check_gradients(inputs, wrt, STEP, f)?.max_relative_error();
        let entry = self.ops.entry(op.to_string()).or_insert((0, 0.0, tol));
        entry.0 += 1;
        entry.1 = entry.1.max(err);
        Ok(())
    }
}

/// Scalar read-out `Σ y·w` with fixed, position-dependent weights so every
/// output element reaches the gradient with a distinct factor.
fn project<'t>(tape: &'t Tape, y: Var<'t>) -> Result<Var<'t>> {
    let w = Tensor::from_fn(y.shape(), |i| (0.37 * i as f64 + 0.5).sin() + 0.2);
    y.mul(tape.constant(w))?.sum()
}

fn dims(rng: &mut ChaCha8Rng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=max)).collect()
}

fn random_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.gen_range(1..=3);
    dims(rng, rank, 4)
}

/// A shape that broadcasts against `shape`: trailing axes, some set to 1.
fn broadcast_partner(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<usize> {
    let keep = rng.gen_range(1..=shape.len());
    shape[shape.len() - keep..]
        .iter()
        .map(|&d| if rng.gen_bool(0.4) { 1 } else { d })
        .collect()
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(KINK_GAP..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// A normalized coordinate whose pixel coordinate `c·n − 0.5` is at least
/// `CELL_GAP` from any integer and whose samples may hang over the border.
fn safe_coord(rng: &mut ChaCha8Rng, n: usize) -> f64 {
    loop {
        let pixel: f64 = rng.gen_range(-0.5 + CELL_GAP..n as f64 - 0.5 - CELL_GAP);
        let frac = pixel - pixel.floor();
        if frac > CELL_GAP && frac < 1.0 - CELL_GAP {
            return (pixel + 0.5) / n as f64;
        }
    }
}

fn safe_points(rng: &mut ChaCha8Rng, count: usize, height: usize, width: usize) -> Vec<f64> {
    (0..count)
        .flat_map(|_| [safe_coord(rng, width), safe_coord(rng, height)])
        .collect()
}

fn elementwise(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    for _ in 0..CASES {
        let a_shape = random_shape(rng);
        let b_shape = broadcast_partner(rng, &a_shape);
        let (a_shape, b_shape) = if rng.gen_bool(0.5) { (a_shape, b_shape) } else { (b_shape, a_shape) };
        let a = uniform(rng, &a_shape, -1.5, 1.5);
        let b = uniform(rng, &b_shape, -1.5, 1.5);
        let both = [true, true];
        s.check("add", TOL, &[a.clone(), b.clone()], &both, |t, v| project(t, v[0].add(v[1])?))?;
        s.check("sub", TOL, &[a.clone(), b.clone()], &both, |t, v| project(t, v[0].sub(v[1])?))?;
        s.check("mul", TOL, &[a.clone(), b.clone()], &both, |t, v| project(t, v[0].mul(v[1])?))?;
        let denom = away_from_zero(rng, &b_shape).map(|x| x.signum() * (0.5 + x.abs()));
        s.check("div", TOL, &[a.clone(), denom], &both, |t, v| project(t, v[0].div(v[1])?))?;

        let factor = rng.gen_range(-2.0..2.0);
        let offset = rng.gen_range(-2.0..2.0);
        s.check("scale", TOL, &[a.clone()], &[true], move |t, v| project(t, v[0].scale(factor)?))?;
        s.check("add_scalar", TOL, &[a.clone()], &[true], move |t, v| project(t, v[0].add_scalar(offset)?))?;
        s.check("neg", TOL, &[a.clone()], &[true], |t, v| project(t, v[0].neg()?))?;
        s.check("sigmoid", TOL, &[a.clone()], &[true], |t, v| project(t, v[0].sigmoid()?))?;
        s.check("exp", TOL, &[a.clone()], &[true], |t, v| project(t, v[0].exp()?))?;

        let kinked = away_from_zero(rng, &a_shape);
        s.check("relu", TOL, &[kinked.clone()], &[true], |t, v| project(t, v[0].relu()?))?;
        s.check("abs", TOL, &[kinked], &[true], |t, v| project(t, v[0].abs()?))?;
        let positive = uniform(rng, &a_shape, 0.2, 3.0);
        s.check("sqrt", TOL, &[positive], &[true], |t, v| project(t, v[0].sqrt()?))?;
    }
    Ok(())
}

fn linear_algebra(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    for _ in 0..CASES {
        let (m, k, n) = (rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=5));
        let a = uniform(rng, &[m, k], -1.0, 1.0);
        let b = uniform(rng, &[k, n], -1.0, 1.0);
        s.check("matmul", TOL, &[a.clone(), b.clone()], &[true, true], |t, v| project(t, v[0].matmul(v[1])?))?;
        s.check("transpose", TOL, &[a.clone()], &[true], |t, v| project(t, v[0].t()?))?;

        let lead_rank = rng.gen_range(0..=1);
        let mut x_shape = dims(rng, lead_rank, 3);
        x_shape.push(rng.gen_range(1..=3));
        x_shape.push(k);
        let x = uniform(rng, &x_shape, -1.0, 1.0);
        let bias = uniform(rng, &[n], -1.0, 1.0);
        s.check("linear", TOL, &[x.clone(), b.clone(), bias], &[true; 3], |t, v| {
            project(t, autodiff::linear(v[0], v[1], Some(v[2]))?)
        })?;
        s.check("linear", TOL, &[x, b], &[true; 2], |t, v| project(t, autodiff::linear(v[0], v[1], None)?))?;

        let rows = rng.gen_range(1..=4);
        // Two-wide rows normalize to ±1 whatever the input, leaving an
        // input gradient of rounding-noise size; three is the smallest
        // width with a well-conditioned gradient.
        let width = rng.gen_range(3..=6);
        let x = uniform(rng, &[rows, width], -2.0, 2.0);
        let gain = uniform(rng, &[width], 0.5, 1.5);
        let shift = uniform(rng, &[width], -0.5, 0.5);
        s.check("layer_norm", TOL, &[x, gain, shift], &[true; 3], |t, v| {
            project(t, autodiff::layer_norm(v[0], v[1], v[2])?)
        })?;
    }
    Ok(())
}

fn shape_ops(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    for _ in 0..CASES {
        let shape = random_shape(rng);
        let x = uniform(rng, &shape, -1.5, 1.5);
        let numel = x.numel();
        let target = if shape.len() > 1 && rng.gen_bool(0.5) {
            vec![shape[0], numel / shape[0]]
        } else {
            vec![numel]
        };
        s.check("reshape", TOL, &[x.clone()], &[true], move |t, v| project(t, v[0].reshape(target.clone())?))?;

        let axis = rng.gen_range(0..shape.len());
        let start = rng.gen_range(0..shape[axis]);
        let len = rng.gen_range(1..=shape[axis] - start);
        s.check("narrow", TOL, &[x.clone()], &[true], move |t, v| project(t, v[0].narrow(axis, start, len)?))?;

        let picks: Vec<usize> = (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(0..shape[axis])).collect();
        s.check("index_select", TOL, &[x.clone()], &[true], move |t, v| {
            project(t, v[0].index_select(axis, &picks)?)
        })?;

        let rows = shape[0];
        let targets = rng.gen_range(1..=4);
        let index: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..targets)).collect();
        let matrix = x.clone().reshape(vec![rows, numel / rows])?;
        s.check("scatter_add_rows", TOL, &[matrix], &[true], move |t, v| {
            project(t, v[0].scatter_add_rows(&index, targets)?)
        })?;

        s.check("sum_axis", TOL, &[x.clone()], &[true], move |t, v| project(t, v[0].sum_axis(axis)?))?;
        s.check("mean_axis", TOL, &[x.clone()], &[true], move |t, v| project(t, v[0].mean_axis(axis)?))?;
        s.check("sum", TOL, &[x.clone()], &[true], |t, v| project(t, v[0].sum()?))?;
        s.check("mean", TOL, &[x.clone()], &[true], |t, v| project(t, v[0].mean()?))?;
        s.check("softmax", TOL, &[x.clone()], &[true], move |t, v| project(t, v[0].softmax(axis)?))?;
        s.check("log_softmax", TOL, &[x.clone()], &[true], |t, v| project(t, v[0].log_softmax()?))?;

        let parts = rng.gen_range(2..=3);
        let inputs: Vec<Tensor> = (0..parts)
            .map(|_| {
                let mut sh = shape.clone();
                sh[axis] = rng.gen_range(1..=3);
                uniform(rng, &sh, -1.0, 1.0)
            })
            .collect();
        let wrt = vec![true; parts];
        s.check("concat", TOL, &inputs, &wrt, move |t, v| project(t, autodiff::concat(v, axis)?))?;
    }
    Ok(())
}

fn image_ops(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    for _ in 0..CASES {
        let (kh, kw) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (c_in, c_out) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
        let (h, w) = (rng.gen_range(kh..=5), rng.gen_range(kw..=5));
        let mut x_shape = vec![c_in, h, w];
        if rng.gen_bool(0.5) {
            x_shape.insert(0, rng.gen_range(1..=2));
        }
        let stride = rng.gen_range(1..=2);
        let padding = rng.gen_range(0..=1);
        let x = uniform(rng, &x_shape, -1.0, 1.0);
        let k = uniform(rng, &[c_out, c_in, kh, kw], -1.0, 1.0);
        s.check("conv2d", TOL, &[x, k], &[true, true], move |t, v| {
            project(t, autodiff::conv2d(v[0], v[1], stride, padding)?)
        })?;

        // Distinct values on a 0.05 grid, so no window ever has a near tie.
        let kernel = rng.gen_range(2..=3);
        let pool_pad = rng.gen_range(0..=kernel / 2);
        let (ph, pw) = (rng.gen_range(kernel..=5), rng.gen_range(kernel..=5));
        let mut pool_shape = vec![rng.gen_range(1..=2), ph, pw];
        if rng.gen_bool(0.5) {
            pool_shape.insert(0, 2);
        }
        let count: usize = pool_shape.iter().product();
        let mut levels: Vec<f64> = (0..count).map(|i| 0.05 * i as f64 - 1.0).collect();
        levels.shuffle(rng);
        let x = Tensor::new(pool_shape, levels)?;
        let pool_stride = rng.gen_range(1..=2);
        s.check("max_pool2d", TOL, &[x], &[true], move |t, v| {
            project(t, autodiff::max_pool2d(v[0], kernel, pool_stride, pool_pad)?)
        })?;
    }
    Ok(())
}

fn sampling_ops(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    for _ in 0..CASES {
        let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let count = rng.gen_range(1..=5);
        let points = Tensor::new(vec![count, 2], safe_points(rng, count, h, w))?;
        let chw = uniform(rng, &[c, h, w], -1.0, 1.0);
        let hwc = uniform(rng, &[h, w, c], -1.0, 1.0);
        let inputs = [chw, points.clone()];
        s.check("bilinear_sample (map)", TOL, &inputs, &[true, false], |t, v| {
            project(t, autodiff::bilinear_sample(v[0], v[1])?)
        })?;
        s.check("bilinear_sample (coords)", TOL_COORDS, &inputs, &[false, true], |t, v| {
            project(t, autodiff::bilinear_sample(v[0], v[1])?)
        })?;
        let inputs = [hwc, points];
        s.check("bilinear_sample_hwc (map)", TOL, &inputs, &[true, false], |t, v| {
            project(t, autodiff::bilinear_sample_hwc(v[0], v[1])?)
        })?;
        s.check("bilinear_sample_hwc (coords)", TOL_COORDS, &inputs, &[false, true], |t, v| {
            project(t, autodiff::bilinear_sample_hwc(v[0], v[1])?)
        })?;

        let levels: Vec<(usize, usize)> = (0..rng.gen_range(1..=2))
            .map(|_| (rng.gen_range(1..=4), rng.gen_range(1..=4)))
            .collect();
        let (queries, heads, per_head, k) =
            (rng.gen_range(1..=3), rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let tokens: usize = levels.iter().map(|(lh, lw)| lh * lw).sum();
        let value = uniform(rng, &[tokens, heads * per_head], -1.0, 1.0);
        let mut coords = Vec::new();
        for _ in 0..queries * heads {
            for &(lh, lw) in &levels {
                coords.extend(safe_points(rng, k, lh, lw));
            }
        }
        let l = levels.len();
        let points = Tensor::new(vec![queries, heads, l, k, 2], coords)?;
        let weights = uniform(rng, &[queries, heads, l, k], 0.0, 1.0);
        let inputs = [value, points, weights];
        let lv = levels.clone();
        s.check("deform_sample (values, weights)", TOL, &inputs, &[true, false, true], move |t, v| {
            project(t, autodiff::deform_sample(v[0], &lv, v[1], v[2])?)
        })?;
        s.check("deform_sample (coords)", TOL_COORDS, &inputs, &[false, true, false], move |t, v| {
            project(t, autodiff::deform_sample(v[0], &levels, v[1], v[2])?)
        })?;
    }
    Ok(())
}

pub fn suite() -> TestResult<Outcome> {
    let mut s = Suite::default();
    elementwise(&mut s, &mut rng(21))?;
    linear_algebra(&mut s, &mut rng(22))?;
    shape_ops(&mut s, &mut rng(23))?;
    image_ops(&mut s, &mut rng(24))?;
    sampling_ops(&mut s, &mut rng(25))?;

    let failing: Vec<String> = s
        .ops
        .iter()
        .filter(|(_, &(cases, err, tol))| cases < CASES || !(err < tol))
        .map(|(op, (cases, err, _))| format!("{op} ({cases} cases, {err:.2e})"))
        .collect();
    let (worst_op, worst) = s
        .ops
        .iter()
        .map(|(op, e)| (op.as_str(), e.1))
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let min_cases = s.ops.values().map(|e| e.0).min().unwrap_or(0);
    let detail = if failing.is_empty() {
        format!(
            "{} operations, >= {min_cases} cases each, worst rel err {worst:.2e} in {worst_op} (tol {TOL:e}, coords {TOL_COORDS:e})",
            s.ops.len()
        )
    } else {
        format!("failing: {}", failing.join(", "))
    };
    Ok(Outcome {
        passed: failing.is_empty(),
        detail,
    })
}
