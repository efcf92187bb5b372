//! Raw numeric kernels shared by the tape ops and by non-differentiable
//! callers (history warping, dataset rendering helpers).

use crate::tensor::Scalar;

/// `c (+)= op(a) · op(b)` for row-major buffers, where `op` optionally
/// transposes. `a` is logically `m×k`, `b` is `k×n`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Scalar],
    a_transposed: bool,
    b: &[Scalar],
    b_transposed: bool,
    c: &mut [Scalar],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    // Strides of the logical (untransposed) views.
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every index reachable through the
    // given dimensions and strides lies inside the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one 2-D convolution / pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn fits(&self) -> bool {
        self.stride > 0
            && self.kernel_h <= self.height + 2 * self.padding
            && self.kernel_w <= self.width + 2 * self.padding
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one `[C,H,W]` image into `[C·kh·kw, H'·W']` columns.
pub fn im2col(g: &ConvGeometry, image: &[Scalar], cols: &mut [Scalar]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    debug_assert_eq!(cols.len(), g.channels * g.kernel_h * g.kernel_w * oh * ow);
    if g.is_pointwise() {
        cols.copy_from_slice(image);
        return;
    }
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *d = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image gradient.
pub fn col2im_add(g: &ConvGeometry, cols: &[Scalar], image: &mut [Scalar]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    if g.is_pointwise() {
        for (d, s) in image.iter_mut().zip(cols) {
            *d += s;
        }
        return;
    }
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Memory layout of a sampled feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapLayout {
    /// `[C, H, W]`
    ChannelFirst,
    /// `[H, W, C]`, i.e. a row-major token matrix `[H·W, C]`.
    ChannelLast,
}

#[derive(Clone, Copy, Debug)]
pub struct MapDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub layout: MapLayout,
}

impl MapDims {
    #[inline]
    fn index(&self, c: usize, y: usize, x: usize) -> usize {
        match self.layout {
            MapLayout::ChannelFirst => (c * self.height + y) * self.width + x,
            MapLayout::ChannelLast => (y * self.width + x) * self.channels + c,
        }
    }
}

/// Bilinear corner weights for a normalized point, align-corners-false.
///
/// Returns `None` when the point lies outside `[0,1]²`, in which case the
/// sample is defined as zero. Corners falling outside the map contribute
/// zero (zero padding).
#[derive(Clone, Copy, Debug)]
pub struct BilinearStencil {
    pub x0: isize,
    pub y0: isize,
    pub fx: Scalar,
    pub fy: Scalar,
}

impl BilinearStencil {
    #[inline]
    pub fn new(u: Scalar, v: Scalar, height: usize, width: usize) -> Option<Self> {
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return None;
        }
        let x = u * width as Scalar - 0.5;
        let y = v * height as Scalar - 0.5;
        let x0 = x.floor();
        let y0 = y.floor();
        Some(Self {
            x0: x0 as isize,
            y0: y0 as isize,
            fx: x - x0,
            fy: y - y0,
        })
    }

    /// The four corners as `(x, y, weight, d weight/dx, d weight/dy)` with
    /// out-of-map corners removed.
    #[inline]
    fn corners(&self, height: usize, width: usize) -> impl Iterator<Item = (usize, usize, Scalar, Scalar, Scalar)> {
        let (fx, fy) = (self.fx, self.fy);
        let raw = [
            (self.x0, self.y0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
            (self.x0 + 1, self.y0, fx * (1.0 - fy), 1.0 - fy, -fx),
            (self.x0, self.y0 + 1, (1.0 - fx) * fy, -fy, 1.0 - fx),
            (self.x0 + 1, self.y0 + 1, fx * fy, fy, fx),
        ];
        raw.into_iter().filter_map(move |(x, y, w, dx, dy)| {
            (x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height)
                .then_some((x as usize, y as usize, w, dx, dy))
        })
    }
}

/// Samples `map` at each `(u, v)` point; writes `[P, C]` into `out`.
pub fn bilinear_forward(dims: &MapDims, map: &[Scalar], points: &[Scalar], out: &mut [Scalar]) {
    let c = dims.channels;
    out.fill(0.0);
    for (p, uv) in points.chunks_exact(2).enumerate() {
        let Some(st) = BilinearStencil::new(uv[0], uv[1], dims.height, dims.width) else {
            continue;
        };
        let dst = &mut out[p * c..(p + 1) * c];
        for (x, y, w, _, _) in st.corners(dims.height, dims.width) {
            match dims.layout {
                MapLayout::ChannelLast => {
                    let base = dims.index(0, y, x);
                    for (d, s) in dst.iter_mut().zip(&map[base..base + c]) {
                        *d += w * s;
                    }
                }
                MapLayout::ChannelFirst => {
                    for (ch, d) in dst.iter_mut().enumerate() {
                        *d += w * map[dims.index(ch, y, x)];
                    }
                }
            }
        }
    }
}

/// Backward of [`bilinear_forward`]. Accumulates into `map_grad` and
/// `point_grad` when provided.
pub fn bilinear_backward(
    dims: &MapDims,
    map: &[Scalar],
    points: &[Scalar],
    out_grad: &[Scalar],
    mut map_grad: Option<&mut [Scalar]>,
    mut point_grad: Option<&mut [Scalar]>,
) {
    let c = dims.channels;
    let (wf, hf) = (dims.width as Scalar, dims.height as Scalar);
    for (p, uv) in points.chunks_exact(2).enumerate() {
        let Some(st) = BilinearStencil::new(uv[0], uv[1], dims.height, dims.width) else {
            continue;
        };
        let g = &out_grad[p * c..(p + 1) * c];
        let (mut du, mut dv) = (0.0, 0.0);
        for (x, y, w, dwx, dwy) in st.corners(dims.height, dims.width) {
            let mut dot = 0.0;
            for (ch, gc) in g.iter().enumerate() {
                let idx = dims.index(ch, y, x);
                dot += gc * map[idx];
                if let Some(mg) = map_grad.as_deref_mut() {
                    mg[idx] += w * gc;
                }
            }
            du += dwx * dot;
            dv += dwy * dot;
        }
        if let Some(pg) = point_grad.as_deref_mut() {
            pg[2 * p] += du * wf;
            pg[2 * p + 1] += dv * hf;
        }
    }
}

/// Layout of a multi-level deformable sampling call.
///
/// `value` is a token matrix `[Σ h·w, heads·head_dim]` holding every level
/// channel-last, level after level. `points` is `[M, heads, levels, K, 2]`
/// and `weights` is `[M, heads, levels, K]`.
#[derive(Clone, Debug)]
pub struct DeformLayout {
    pub levels: Vec<(usize, usize)>,
    pub heads: usize,
    pub head_dim: usize,
    pub points: usize,
}

impl DeformLayout {
    pub fn dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn tokens(&self) -> usize {
        self.levels.iter().map(|(h, w)| h * w).sum()
    }

    fn level_starts(&self) -> Vec<usize> {
        let mut acc = 0;
        self.levels
            .iter()
            .map(|(h, w)| {
                let s = acc;
                acc += h * w;
                s
            })
            .collect()
    }
}

/// Weighted sum of bilinear samples per query and head; writes `[M, D]`.
pub fn deform_forward(layout: &DeformLayout, value: &[Scalar], points: &[Scalar], weights: &[Scalar], out: &mut [Scalar]) {
    let (d, hd) = (layout.dim(), layout.head_dim);
    let starts = layout.level_starts();
    let per_query = layout.heads * layout.levels.len() * layout.points;
    out.fill(0.0);
    for (m, dst) in out.chunks_exact_mut(d).enumerate() {
        let mut s = m * per_query;
        for h in 0..layout.heads {
            let dst = &mut dst[h * hd..(h + 1) * hd];
            for (l, &(lh, lw)) in layout.levels.iter().enumerate() {
                for _ in 0..layout.points {
                    let a = weights[s];
                    let stencil = BilinearStencil::new(points[2 * s], points[2 * s + 1], lh, lw);
                    s += 1;
                    let Some(st) = stencil else { continue };
                    for (x, y, w, _, _) in st.corners(lh, lw) {
                        let base = (starts[l] + y * lw + x) * d + h * hd;
                        let aw = a * w;
                        for (o, v) in dst.iter_mut().zip(&value[base..base + hd]) {
                            *o += aw * v;
                        }
                    }
                }
            }
        }
    }
}

/// Backward of [`deform_forward`], accumulating into whichever gradient
/// buffers are provided.
#[allow(clippy::too_many_arguments)]
pub fn deform_backward(
    layout: &DeformLayout,
    value: &[Scalar],
    points: &[Scalar],
    weights: &[Scalar],
    out_grad: &[Scalar],
    mut value_grad: Option<&mut [Scalar]>,
    mut point_grad: Option<&mut [Scalar]>,
    mut weight_grad: Option<&mut [Scalar]>,
) {
    let (d, hd) = (layout.dim(), layout.head_dim);
    let starts = layout.level_starts();
    let per_query = layout.heads * layout.levels.len() * layout.points;
    for (m, g) in out_grad.chunks_exact(d).enumerate() {
        let mut s = m * per_query;
        for h in 0..layout.heads {
            let g = &g[h * hd..(h + 1) * hd];
            for (l, &(lh, lw)) in layout.levels.iter().enumerate() {
                for _ in 0..layout.points {
                    let a = weights[s];
                    let stencil = BilinearStencil::new(points[2 * s], points[2 * s + 1], lh, lw);
                    let idx = s;
                    s += 1;
                    let Some(st) = stencil else { continue };
                    let (mut sample_dot, mut du, mut dv) = (0.0, 0.0, 0.0);
                    for (x, y, w, dwx, dwy) in st.corners(lh, lw) {
                        let base = (starts[l] + y * lw + x) * d + h * hd;
                        let dot: Scalar = g.iter().zip(&value[base..base + hd]).map(|(a, b)| a * b).sum();
                        sample_dot += w * dot;
                        du += dwx * dot;
                        dv += dwy * dot;
                        if let Some(vg) = value_grad.as_deref_mut() {
                            let aw = a * w;
                            for (o, gi) in vg[base..base + hd].iter_mut().zip(g) {
                                *o += aw * gi;
                            }
                        }
                    }
                    if let Some(wg) = weight_grad.as_deref_mut() {
                        wg[idx] += sample_dot;
                    }
                    if let Some(pg) = point_grad.as_deref_mut() {
                        pg[2 * idx] += a * du * lw as Scalar;
                        pg[2 * idx + 1] += a * dv * lh as Scalar;
                    }
                }
            }
        }
    }
}
