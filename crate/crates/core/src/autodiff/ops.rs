use std::rc::Rc;

use super::kernels::{self, ConvGeometry, DeformLayout, MapDims, MapLayout};
use super::{Node, NodeId, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const LAYER_NORM_EPS: Scalar = 1e-5;

#[derive(Clone, Copy, Debug)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum UnaryKind {
    Neg,
    Relu,
    Sigmoid,
    Abs,
    Sqrt,
    Exp,
}

pub(crate) enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: NodeId,
        b: NodeId,
        /// Output index → input index; `None` when shapes already match.
        map_a: Option<Vec<usize>>,
        map_b: Option<Vec<usize>>,
    },
    Scale(NodeId, Scalar),
    AddScalar(NodeId),
    Unary(NodeId, UnaryKind),
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        input: NodeId,
        rows: usize,
        cols: usize,
    },
    Reshape(NodeId),
    Narrow {
        input: NodeId,
        outer: usize,
        axis_len: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Concat {
        inputs: Vec<NodeId>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    IndexSelect {
        input: NodeId,
        outer: usize,
        axis_len: usize,
        inner: usize,
        index: Vec<usize>,
    },
    ScatterAddRows {
        input: NodeId,
        width: usize,
        index: Vec<usize>,
    },
    SumAxis {
        input: NodeId,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    SumAll(NodeId),
    Softmax {
        input: NodeId,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    LogSoftmax {
        input: NodeId,
        width: usize,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        width: usize,
        xhat: Vec<Scalar>,
        rstd: Vec<Scalar>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        batch: usize,
        geom: ConvGeometry,
        out_channels: usize,
    },
    MaxPool2d {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Bilinear {
        map: NodeId,
        points: NodeId,
        dims: MapDims,
    },
    DeformSample {
        value: NodeId,
        points: NodeId,
        weights: NodeId,
        layout: DeformLayout,
    },
}

fn finish<'t>(tape: &'t Tape, op_name: &'static str, value: Tensor, op: Op, inputs: &[NodeId]) -> Result<Var<'t>> {
    if cfg!(debug_assertions) && !value.is_finite() {
        return Err(Error::NonFinite(op_name));
    }
    let requires_grad = inputs.iter().any(|&i| tape.requires_grad(i));
    Ok(tape.push_node(Rc::new(value), op, requires_grad))
}

fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat output index, the flat index into the (broadcast) input.
fn broadcast_map(input: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    if input == out {
        return None;
    }
    let n = out.len();
    let offset = n - input.len();
    let mut strides = vec![0usize; n];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        strides[i + offset] = if input[i] == 1 { 0 } else { acc };
        acc *= input[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for d in (0..n).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

#[inline]
fn at(map: &Option<Vec<usize>>, i: usize) -> usize {
    map.as_ref().map_or(i, |m| m[i])
}

pub(crate) fn binary<'t>(a: Var<'t>, b: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
    let tape = a.tape;
    let (va, vb) = (a.value(), b.value());
    let out_shape = broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| {
        Error::shape(
            match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            },
            va.shape(),
            vb.shape(),
        )
    })?;
    let map_a = broadcast_map(va.shape(), &out_shape);
    let map_b = broadcast_map(vb.shape(), &out_shape);
    let n: usize = out_shape.iter().product();
    let (da, db) = (va.data(), vb.data());
    let f: fn(Scalar, Scalar) -> Scalar = match kind {
        BinaryKind::Add => |x, y| x + y,
        BinaryKind::Sub => |x, y| x - y,
        BinaryKind::Mul => |x, y| x * y,
        BinaryKind::Div => |x, y| x / y,
    };
    let data: Vec<Scalar> = match (&map_a, &map_b) {
        (None, None) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
        _ => (0..n).map(|i| f(da[at(&map_a, i)], db[at(&map_b, i)])).collect(),
    };
    tape.add_flops(n as u64);
    finish(
        tape,
        "binary op",
        Tensor::from_parts(out_shape, data),
        Op::Binary {
            kind,
            a: a.id,
            b: b.id,
            map_a,
            map_b,
        },
        &[a.id, b.id],
    )
}

pub(crate) fn scale(x: Var<'_>, factor: Scalar) -> Result<Var<'_>> {
    let v = x.value();
    x.tape.add_flops(v.numel() as u64);
    finish(x.tape, "scale", v.map(|e| e * factor), Op::Scale(x.id, factor), &[x.id])
}

pub(crate) fn add_scalar(x: Var<'_>, value: Scalar) -> Result<Var<'_>> {
    let v = x.value();
    finish(x.tape, "add_scalar", v.map(|e| e + value), Op::AddScalar(x.id), &[x.id])
}

pub(crate) fn unary(x: Var<'_>, kind: UnaryKind) -> Result<Var<'_>> {
    let v = x.value();
    let out = match kind {
        UnaryKind::Neg => v.map(|e| -e),
        UnaryKind::Relu => v.map(|e| e.max(0.0)),
        UnaryKind::Sigmoid => v.map(sigmoid),
        UnaryKind::Abs => v.map(Scalar::abs),
        UnaryKind::Sqrt => v.map(Scalar::sqrt),
        UnaryKind::Exp => v.map(Scalar::exp),
    };
    x.tape.add_flops(v.numel() as u64);
    finish(x.tape, "unary op", out, Op::Unary(x.id, kind), &[x.id])
}

#[inline]
pub(crate) fn sigmoid(x: Scalar) -> Scalar {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (va, vb) = (a.value(), b.value());
    let (sa, sb) = (va.shape(), vb.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::shape("matmul", sa, sb));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0; m * n];
    kernels::gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, false);
    a.tape.add_flops(2 * (m * k * n) as u64);
    finish(
        a.tape,
        "matmul",
        Tensor::from_parts(vec![m, n], out),
        Op::MatMul { a: a.id, b: b.id, m, k, n },
        &[a.id, b.id],
    )
}

pub(crate) fn transpose(x: Var<'_>) -> Result<Var<'_>> {
    let v = x.value();
    let s = v.shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!("transpose needs a 2-D tensor, got {s:?}")));
    }
    let (rows, cols) = (s[0], s[1]);
    let d = v.data();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = d[r * cols + c];
        }
    }
    finish(
        x.tape,
        "transpose",
        Tensor::from_parts(vec![cols, rows], out),
        Op::Transpose { input: x.id, rows, cols },
        &[x.id],
    )
}

pub(crate) fn reshape(x: Var<'_>, shape: Vec<usize>) -> Result<Var<'_>> {
    let v = x.value();
    if v.shape() == shape.as_slice() {
        return Ok(x);
    }
    let out = Tensor::clone(&v).reshape(shape)?;
    finish(x.tape, "reshape", out, Op::Reshape(x.id), &[x.id])
}

pub(crate) fn narrow(x: Var<'_>, axis: usize, start: usize, len: usize) -> Result<Var<'_>> {
    let v = x.value();
    let (outer, axis_len, inner) = split_axis(v.shape(), axis, "narrow")?;
    if len == 0 || start + len > axis_len {
        return Err(Error::Dimension(format!(
            "narrow [{start}, {}) out of range for axis {axis} of {:?}",
            start + len,
            v.shape()
        )));
    }
    let d = v.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * axis_len + start) * inner;
        out.extend_from_slice(&d[base..base + len * inner]);
    }
    let mut shape = v.shape().to_vec();
    shape[axis] = len;
    finish(
        x.tape,
        "narrow",
        Tensor::from_parts(shape, out),
        Op::Narrow {
            input: x.id,
            outer,
            axis_len,
            inner,
            start,
            len,
        },
        &[x.id],
    )
}

pub(crate) fn concat<'t>(inputs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor>> = inputs.iter().map(Var::value).collect();
    let base = values[0].shape().to_vec();
    let (outer, _, inner) = split_axis(&base, axis, "concat")?;
    let mut lens = Vec::with_capacity(values.len());
    for v in &values {
        let s = v.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::shape("concat", &base, s));
        }
        lens.push(s[axis]);
    }
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &len) in values.iter().zip(&lens) {
            out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    let ids: Vec<NodeId> = inputs.iter().map(|v| v.id).collect();
    finish(
        tape,
        "concat",
        Tensor::from_parts(shape, out),
        Op::Concat {
            inputs: ids.clone(),
            outer,
            inner,
            lens,
        },
        &ids,
    )
}

pub(crate) fn index_select(x: Var<'_>, axis: usize, index: Vec<usize>) -> Result<Var<'_>> {
    let v = x.value();
    let (outer, axis_len, inner) = split_axis(v.shape(), axis, "index_select")?;
    if index.is_empty() {
        return Err(Error::Dimension("index_select with an empty index".into()));
    }
    if let Some(&bad) = index.iter().find(|&&i| i >= axis_len) {
        return Err(Error::Dimension(format!(
            "index_select: index {bad} out of range for axis {axis} of {:?}",
            v.shape()
        )));
    }
    let d = v.data();
    let mut out = Vec::with_capacity(outer * index.len() * inner);
    for o in 0..outer {
        for &i in &index {
            let base = (o * axis_len + i) * inner;
            out.extend_from_slice(&d[base..base + inner]);
        }
    }
    let mut shape = v.shape().to_vec();
    shape[axis] = index.len();
    finish(
        x.tape,
        "index_select",
        Tensor::from_parts(shape, out),
        Op::IndexSelect {
            input: x.id,
            outer,
            axis_len,
            inner,
            index,
        },
        &[x.id],
    )
}

pub(crate) fn scatter_add_rows(x: Var<'_>, index: Vec<usize>, rows: usize) -> Result<Var<'_>> {
    let v = x.value();
    let s = v.shape();
    if s[0] != index.len() {
        return Err(Error::Dimension(format!(
            "scatter_add_rows: {} rows but {} indices",
            s[0],
            index.len()
        )));
    }
    if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
        return Err(Error::Dimension(format!(
            "scatter_add_rows: index {bad} out of range for {rows} rows"
        )));
    }
    let width: usize = s[1..].iter().product();
    let mut out = vec![0.0; rows * width];
    for (r, &dst) in index.iter().enumerate() {
        let src = &v.data()[r * width..(r + 1) * width];
        for (o, s) in out[dst * width..(dst + 1) * width].iter_mut().zip(src) {
            *o += s;
        }
    }
    let mut shape = s.to_vec();
    shape[0] = rows;
    finish(
        x.tape,
        "scatter_add_rows",
        Tensor::from_parts(shape, out),
        Op::ScatterAddRows {
            input: x.id,
            width,
            index,
        },
        &[x.id],
    )
}

pub(crate) fn sum_axis(x: Var<'_>, axis: usize) -> Result<Var<'_>> {
    let v = x.value();
    let (outer, axis_len, inner) = split_axis(v.shape(), axis, "sum_axis")?;
    let d = v.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for a in 0..axis_len {
            let src = &d[(o * axis_len + a) * inner..(o * axis_len + a + 1) * inner];
            for (t, s) in dst.iter_mut().zip(src) {
                *t += s;
            }
        }
    }
    let mut shape = v.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    x.tape.add_flops(v.numel() as u64);
    finish(
        x.tape,
        "sum_axis",
        Tensor::from_parts(shape, out),
        Op::SumAxis {
            input: x.id,
            outer,
            axis_len,
            inner,
        },
        &[x.id],
    )
}

pub(crate) fn sum_all(x: Var<'_>) -> Result<Var<'_>> {
    let v = x.value();
    finish(x.tape, "sum", Tensor::scalar(v.sum()), Op::SumAll(x.id), &[x.id])
}

pub(crate) fn softmax(x: Var<'_>, axis: usize) -> Result<Var<'_>> {
    let v = x.value();
    let (outer, axis_len, inner) = split_axis(v.shape(), axis, "softmax")?;
    let d = v.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * axis_len + a) * inner + i;
            let max = (0..axis_len).map(|a| d[idx(a)]).fold(Scalar::NEG_INFINITY, Scalar::max);
            let mut total = 0.0;
            for a in 0..axis_len {
                let e = (d[idx(a)] - max).exp();
                out[idx(a)] = e;
                total += e;
            }
            for a in 0..axis_len {
                out[idx(a)] /= total;
            }
        }
    }
    x.tape.add_flops(3 * d.len() as u64);
    finish(
        x.tape,
        "softmax",
        Tensor::from_parts(v.shape().to_vec(), out),
        Op::Softmax {
            input: x.id,
            outer,
            axis_len,
            inner,
        },
        &[x.id],
    )
}

pub(crate) fn log_softmax(x: Var<'_>) -> Result<Var<'_>> {
    let v = x.value();
    let width = *v.shape().last().unwrap();
    let mut out = v.data().to_vec();
    for row in out.chunks_exact_mut(width) {
        let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
        let lse = max + row.iter().map(|e| (e - max).exp()).sum::<Scalar>().ln();
        row.iter_mut().for_each(|e| *e -= lse);
    }
    finish(
        x.tape,
        "log_softmax",
        Tensor::from_parts(v.shape().to_vec(), out),
        Op::LogSoftmax { input: x.id, width },
        &[x.id],
    )
}

pub(crate) fn layer_norm<'t>(x: Var<'t>, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let (vx, vg, vb) = (x.value(), gain.value(), bias.value());
    let width = *vx.shape().last().unwrap();
    if vg.shape() != [width] || vb.shape() != [width] {
        return Err(Error::shape("layer_norm", vx.shape(), vg.shape()));
    }
    let rows = vx.numel() / width;
    let mut xhat = vec![0.0; vx.numel()];
    let mut rstd = vec![0.0; rows];
    let mut out = vec![0.0; vx.numel()];
    for r in 0..rows {
        let row = &vx.data()[r * width..(r + 1) * width];
        let mean = row.iter().sum::<Scalar>() / width as Scalar;
        let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<Scalar>() / width as Scalar;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..width {
            let h = (row[j] - mean) * rs;
            xhat[r * width + j] = h;
            out[r * width + j] = h * vg.data()[j] + vb.data()[j];
        }
    }
    x.tape.add_flops(5 * vx.numel() as u64);
    finish(
        x.tape,
        "layer_norm",
        Tensor::from_parts(vx.shape().to_vec(), out),
        Op::LayerNorm {
            x: x.id,
            gain: gain.id,
            bias: bias.id,
            width,
            xhat,
            rstd,
        },
        &[x.id, gain.id, bias.id],
    )
}

fn image_batch(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Dimension(format!(
            "{op} expects [C,H,W] or [N,C,H,W], got {shape:?}"
        ))),
    }
}

pub(crate) fn conv2d<'t>(x: Var<'t>, w: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
    let (vx, vw) = (x.value(), w.value());
    let (batch, c_in, h, wd) = image_batch(vx.shape(), "conv2d")?;
    let &[c_out, wc_in, kh, kw] = vw.shape() else {
        return Err(Error::Dimension(format!(
            "conv2d kernels must be [C_out,C_in,kh,kw], got {:?}",
            vw.shape()
        )));
    };
    if wc_in != c_in {
        return Err(Error::shape("conv2d", vx.shape(), vw.shape()));
    }
    let geom = ConvGeometry {
        channels: c_in,
        height: h,
        width: wd,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
    };
    if !geom.fits() {
        return Err(Error::Dimension(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {}x{} (stride {stride})",
            h + 2 * padding,
            wd + 2 * padding
        )));
    }
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let k = c_in * kh * kw;
    let cols_len = k * oh * ow;
    let mut cols = vec![0.0; cols_len];
    let mut out = vec![0.0; batch * c_out * oh * ow];
    let img_len = c_in * h * wd;
    for b in 0..batch {
        kernels::im2col(&geom, &vx.data()[b * img_len..(b + 1) * img_len], &mut cols);
        kernels::gemm(
            c_out,
            k,
            oh * ow,
            vw.data(),
            false,
            &cols,
            false,
            &mut out[b * c_out * oh * ow..(b + 1) * c_out * oh * ow],
            false,
        );
    }
    x.tape.add_flops(2 * (batch * c_out * k * oh * ow) as u64);
    let shape = if vx.ndim() == 3 {
        vec![c_out, oh, ow]
    } else {
        vec![batch, c_out, oh, ow]
    };
    finish(
        x.tape,
        "conv2d",
        Tensor::from_parts(shape, out),
        Op::Conv2d {
            x: x.id,
            w: w.id,
            batch,
            geom,
            out_channels: c_out,
        },
        &[x.id, w.id],
    )
}

pub(crate) fn max_pool2d(x: Var<'_>, kernel: usize, stride: usize, padding: usize) -> Result<Var<'_>> {
    let v = x.value();
    let (batch, c, h, w) = image_batch(v.shape(), "max_pool2d")?;
    let geom = ConvGeometry {
        channels: c,
        height: h,
        width: w,
        kernel_h: kernel,
        kernel_w: kernel,
        stride,
        padding,
    };
    if !geom.fits() || padding >= kernel {
        return Err(Error::Dimension(format!(
            "max_pool2d window {kernel} (pad {padding}) does not fit {h}x{w}"
        )));
    }
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let mut out = Vec::with_capacity(batch * c * oh * ow);
    let mut argmax = Vec::with_capacity(batch * c * oh * ow);
    let d = v.data();
    for plane in 0..batch * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = Scalar::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if d[idx] > best {
                            best = d[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    let shape = if v.ndim() == 3 {
        vec![c, oh, ow]
    } else {
        vec![batch, c, oh, ow]
    };
    finish(
        x.tape,
        "max_pool2d",
        Tensor::from_parts(shape, out),
        Op::MaxPool2d { x: x.id, argmax },
        &[x.id],
    )
}

pub(crate) fn bilinear<'t>(map: Var<'t>, points: Var<'t>, layout: MapLayout) -> Result<Var<'t>> {
    let (vm, vp) = (map.value(), points.value());
    let dims = match (layout, vm.shape()) {
        (MapLayout::ChannelFirst, &[c, h, w]) => MapDims {
            channels: c,
            height: h,
            width: w,
            layout,
        },
        (MapLayout::ChannelLast, &[h, w, c]) => MapDims {
            channels: c,
            height: h,
            width: w,
            layout,
        },
        _ => {
            return Err(Error::Dimension(format!(
                "bilinear_sample map must be 3-D, got {:?}",
                vm.shape()
            )))
        }
    };
    if vp.ndim() != 2 || vp.shape()[1] != 2 {
        return Err(Error::Dimension(format!(
            "bilinear_sample points must be [P,2], got {:?}",
            vp.shape()
        )));
    }
    let p = vp.shape()[0];
    let mut out = vec![0.0; p * dims.channels];
    kernels::bilinear_forward(&dims, vm.data(), vp.data(), &mut out);
    map.tape.add_flops(8 * (p * dims.channels) as u64);
    finish(
        map.tape,
        "bilinear_sample",
        Tensor::from_parts(vec![p, dims.channels], out),
        Op::Bilinear {
            map: map.id,
            points: points.id,
            dims,
        },
        &[map.id, points.id],
    )
}

pub(crate) fn deform_sample<'t>(
    value: Var<'t>,
    levels: &[(usize, usize)],
    points: Var<'t>,
    weights: Var<'t>,
) -> Result<Var<'t>> {
    let (vv, vp, vw) = (value.value(), points.value(), weights.value());
    let ps = vp.shape();
    if ps.len() != 5 || ps[4] != 2 || ps[2] != levels.len() {
        return Err(Error::Dimension(format!(
            "deform_sample points must be [M, heads, {}, K, 2], got {ps:?}",
            levels.len()
        )));
    }
    if vw.shape() != &ps[..4] {
        return Err(Error::shape("deform_sample weights", vw.shape(), &ps[..4]));
    }
    let (m, heads, k) = (ps[0], ps[1], ps[3]);
    let tokens: usize = levels.iter().map(|(h, w)| h * w).sum();
    let vs = vv.shape();
    if vs.len() != 2 || vs[0] != tokens || vs[1] % heads != 0 {
        return Err(Error::Dimension(format!(
            "deform_sample value must be [{tokens}, heads·head_dim] with {heads} heads, got {vs:?}"
        )));
    }
    let layout = DeformLayout {
        levels: levels.to_vec(),
        heads,
        head_dim: vs[1] / heads,
        points: k,
    };
    let mut out = vec![0.0; m * vs[1]];
    kernels::deform_forward(&layout, vv.data(), vp.data(), vw.data(), &mut out);
    value.tape.add_flops(10 * (m * vs[1] * levels.len() * k) as u64);
    finish(
        value.tape,
        "deform_sample",
        Tensor::from_parts(vec![m, vs[1]], out),
        Op::DeformSample {
            value: value.id,
            points: points.id,
            weights: weights.id,
            layout,
        },
        &[value.id, points.id, weights.id],
    )
}

// ---------------------------------------------------------------------------
// Backward rules
// ---------------------------------------------------------------------------

/// Returns the gradient buffer of `id`, allocating zeros on first use, or
/// `None` when the node does not need a gradient.
fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Tensor>], id: NodeId) -> Option<&'g mut [Scalar]> {
    if !nodes[id].requires_grad {
        return None;
    }
    let g = grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape().to_vec()));
    Some(g.data_mut())
}

pub(crate) fn backward(nodes: &[Node], id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let gd = g.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Binary {
            kind,
            a,
            b,
            map_a,
            map_b,
        } => {
            let (va, vb) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            let (da, db) = (va.data(), vb.data());
            if let Some(ga) = slot(nodes, grads, *a) {
                for (i, &gi) in gd.iter().enumerate() {
                    let ia = at(map_a, i);
                    ga[ia] += match kind {
                        BinaryKind::Add | BinaryKind::Sub => gi,
                        BinaryKind::Mul => gi * db[at(map_b, i)],
                        BinaryKind::Div => gi / db[at(map_b, i)],
                    };
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (i, &gi) in gd.iter().enumerate() {
                    let ib = at(map_b, i);
                    gb[ib] += match kind {
                        BinaryKind::Add => gi,
                        BinaryKind::Sub => -gi,
                        BinaryKind::Mul => gi * da[at(map_a, i)],
                        BinaryKind::Div => {
                            let y = db[ib];
                            -gi * da[at(map_a, i)] / (y * y)
                        }
                    };
                }
            }
        }
        Op::Scale(x, factor) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(gd).for_each(|(t, s)| *t += factor * s);
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(gd).for_each(|(t, s)| *t += s);
            }
        }
        Op::Unary(x, kind) => {
            let vx = nodes[*x].value.clone();
            let Some(gx) = slot(nodes, grads, *x) else { return };
            let (xd, yd) = (vx.data(), out.data());
            for i in 0..gd.len() {
                gx[i] += gd[i]
                    * match kind {
                        UnaryKind::Neg => -1.0,
                        UnaryKind::Relu => {
                            if xd[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Sigmoid => yd[i] * (1.0 - yd[i]),
                        UnaryKind::Abs => {
                            if xd[i] > 0.0 {
                                1.0
                            } else if xd[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Sqrt => 0.5 / yd[i],
                        UnaryKind::Exp => yd[i],
                    };
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (va, vb) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            if let Some(ga) = slot(nodes, grads, *a) {
                // dA += dC · Bᵀ
                kernels::gemm(*m, *n, *k, gd, false, vb.data(), true, ga, true);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                // dB += Aᵀ · dC
                kernels::gemm(*k, *m, *n, va.data(), true, gd, false, gb, true);
            }
        }
        Op::Transpose { input, rows, cols } => {
            if let Some(gx) = slot(nodes, grads, *input) {
                for r in 0..*rows {
                    for c in 0..*cols {
                        gx[r * cols + c] += gd[c * rows + r];
                    }
                }
            }
        }
        Op::Narrow {
            input,
            outer,
            axis_len,
            inner,
            start,
            len,
        } => {
            if let Some(gx) = slot(nodes, grads, *input) {
                for o in 0..*outer {
                    let dst = (o * axis_len + start) * inner;
                    let src = o * len * inner;
                    for j in 0..len * inner {
                        gx[dst + j] += gd[src + j];
                    }
                }
            }
        }
        Op::Concat {
            inputs,
            outer,
            inner,
            lens,
        } => {
            let total: usize = lens.iter().sum();
            let mut offset = 0;
            for (&input, &len) in inputs.iter().zip(lens) {
                if let Some(gx) = slot(nodes, grads, input) {
                    for o in 0..*outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        for j in 0..len * inner {
                            gx[dst + j] += gd[src + j];
                        }
                    }
                }
                offset += len;
            }
        }
        Op::IndexSelect {
            input,
            outer,
            axis_len,
            inner,
            index,
        } => {
            if let Some(gx) = slot(nodes, grads, *input) {
                let mut src = 0;
                for o in 0..*outer {
                    for &i in index {
                        let dst = (o * axis_len + i) * inner;
                        for j in 0..*inner {
                            gx[dst + j] += gd[src + j];
                        }
                        src += inner;
                    }
                }
            }
        }
        Op::ScatterAddRows { input, width, index } => {
            if let Some(gx) = slot(nodes, grads, *input) {
                for (r, &dst) in index.iter().enumerate() {
                    for j in 0..*width {
                        gx[r * width + j] += gd[dst * width + j];
                    }
                }
            }
        }
        Op::SumAxis {
            input,
            outer,
            axis_len,
            inner,
        } => {
            if let Some(gx) = slot(nodes, grads, *input) {
                for o in 0..*outer {
                    for a in 0..*axis_len {
                        for i in 0..*inner {
                            gx[(o * axis_len + a) * inner + i] += gd[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::SumAll(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|t| *t += gd[0]);
            }
        }
        Op::Softmax {
            input,
            outer,
            axis_len,
            inner,
        } => {
            let y = out.data();
            if let Some(gx) = slot(nodes, grads, *input) {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |a: usize| (o * axis_len + a) * inner + i;
                        let dot: Scalar = (0..*axis_len).map(|a| gd[idx(a)] * y[idx(a)]).sum();
                        for a in 0..*axis_len {
                            gx[idx(a)] += y[idx(a)] * (gd[idx(a)] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax { input, width } => {
            let y = out.data();
            if let Some(gx) = slot(nodes, grads, *input) {
                for (r, grow) in gd.chunks_exact(*width).enumerate() {
                    let total: Scalar = grow.iter().sum();
                    for j in 0..*width {
                        let idx = r * width + j;
                        gx[idx] += grow[j] - y[idx].exp() * total;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            width,
            xhat,
            rstd,
        } => {
            let vg = nodes[*gain].value.clone();
            let w = *width;
            if let Some(gg) = slot(nodes, grads, *gain) {
                for (r, grow) in gd.chunks_exact(w).enumerate() {
                    for j in 0..w {
                        gg[j] += grow[j] * xhat[r * w + j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for grow in gd.chunks_exact(w) {
                    for j in 0..w {
                        gb[j] += grow[j];
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let gain = vg.data();
                for (r, grow) in gd.chunks_exact(w).enumerate() {
                    let h = &xhat[r * w..(r + 1) * w];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..w {
                        let d = grow[j] * gain[j];
                        mean_d += d;
                        mean_dh += d * h[j];
                    }
                    mean_d /= w as Scalar;
                    mean_dh /= w as Scalar;
                    for j in 0..w {
                        let d = grow[j] * gain[j];
                        gx[r * w + j] += rstd[r] * (d - mean_d - h[j] * mean_dh);
                    }
                }
            }
        }
        Op::Conv2d {
            x,
            w,
            batch,
            geom,
            out_channels,
        } => {
            let (vx, vw) = (nodes[*x].value.clone(), nodes[*w].value.clone());
            let (oh, ow) = (geom.out_height(), geom.out_width());
            let k = geom.channels * geom.kernel_h * geom.kernel_w;
            let img_len = geom.channels * geom.height * geom.width;
            let out_len = out_channels * oh * ow;
            let mut cols = vec![0.0; k * oh * ow];
            let need_w = nodes[*w].requires_grad;
            let need_x = nodes[*x].requires_grad;
            for b in 0..*batch {
                let gout = &gd[b * out_len..(b + 1) * out_len];
                if need_w {
                    kernels::im2col(geom, &vx.data()[b * img_len..(b + 1) * img_len], &mut cols);
                    let gw = slot(nodes, grads, *w).unwrap();
                    // dW += dY · colsᵀ
                    kernels::gemm(*out_channels, oh * ow, k, gout, false, &cols, true, gw, true);
                }
                if need_x {
                    // dcols = Wᵀ · dY
                    kernels::gemm(k, *out_channels, oh * ow, vw.data(), true, gout, false, &mut cols, false);
                    let gx = slot(nodes, grads, *x).unwrap();
                    kernels::col2im_add(geom, &cols, &mut gx[b * img_len..(b + 1) * img_len]);
                }
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (&src, &gi) in argmax.iter().zip(gd) {
                    if src != usize::MAX {
                        gx[src] += gi;
                    }
                }
            }
        }
        Op::Bilinear { map, points, dims } => {
            let (vm, vp) = (nodes[*map].value.clone(), nodes[*points].value.clone());
            let need_map = nodes[*map].requires_grad;
            let need_pts = nodes[*points].requires_grad;
            // Two separate mutable slots cannot be borrowed at once; take them
            // out of the gradient table temporarily.
            let mut gm = need_map.then(|| {
                grads[*map]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(vm.shape().to_vec()))
            });
            let mut gp = need_pts.then(|| {
                grads[*points]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(vp.shape().to_vec()))
            });
            kernels::bilinear_backward(
                dims,
                vm.data(),
                vp.data(),
                gd,
                gm.as_mut().map(Tensor::data_mut),
                gp.as_mut().map(Tensor::data_mut),
            );
            if let Some(gm) = gm {
                grads[*map] = Some(gm);
            }
            if let Some(gp) = gp {
                grads[*points] = Some(gp);
            }
        }
        Op::DeformSample {
            value,
            points,
            weights,
            layout,
        } => {
            let vv = nodes[*value].value.clone();
            let vp = nodes[*points].value.clone();
            let vw = nodes[*weights].value.clone();
            let mut take = |id: NodeId, shape: &[usize]| {
                nodes[id]
                    .requires_grad
                    .then(|| grads[id].take().unwrap_or_else(|| Tensor::zeros(shape.to_vec())))
            };
            let mut gv = take(*value, vv.shape());
            let mut gp = take(*points, vp.shape());
            let mut gw = take(*weights, vw.shape());
            kernels::deform_backward(
                layout,
                vv.data(),
                vp.data(),
                vw.data(),
                gd,
                gv.as_mut().map(Tensor::data_mut),
                gp.as_mut().map(Tensor::data_mut),
                gw.as_mut().map(Tensor::data_mut),
            );
            for (id, g) in [(*value, gv), (*points, gp), (*weights, gw)] {
                if g.is_some() {
                    grads[id] = g;
                }
            }
        }
    }
}
