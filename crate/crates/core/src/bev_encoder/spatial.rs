use crate::autodiff::{self, Var};
use crate::error::{Error, Result};
use crate::geometry::{BevGeometry, Camera};
use crate::nn::Ctx;
use crate::tensor::{Scalar, Tensor};

use super::deform::DeformAttention;

/// Pillar points of one camera that land inside its image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewHits {
    /// Cells with at least one hit, ascending.
    pub cells: Vec<usize>,
    /// `[cells, heights, 2]` normalized image coordinates; `(-1, -1)` for a
    /// missed height.
    pub refs: Vec<Scalar>,
    /// `[cells, heights]`
    pub hit: Vec<bool>,
}

/// Camera-visibility geometry of the BEV pillars: which `(view, height)`
/// pairs see each cell and where. Depends only on the grid, the pillar
/// heights and the cameras.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialSampling {
    pub num_cells: usize,
    pub heights: Vec<Scalar>,
    pub views: Vec<ViewHits>,
    /// Number of hit `(view, height)` pairs per cell.
    pub hit_counts: Vec<usize>,
}

impl SpatialSampling {
    pub fn new(geometry: &BevGeometry, cameras: &[Camera], heights: &[Scalar]) -> Result<Self> {
        let n = geometry.num_cells();
        let z = heights.len();
        let mut hit_counts = vec![0usize; n];
        let mut views = Vec::with_capacity(cameras.len());
        for cam in cameras {
            let mut vh = ViewHits {
                cells: Vec::new(),
                refs: Vec::new(),
                hit: Vec::new(),
            };
            for (cell, count) in hit_counts.iter_mut().enumerate() {
                let c = geometry.cell_center(cell);
                let proj: Vec<Option<[Scalar; 2]>> = heights.iter().map(|&h| cam.project([c[0], c[1], h])).collect();
                if proj.iter().all(Option::is_none) {
                    continue;
                }
                vh.cells.push(cell);
                for p in proj {
                    match p {
                        Some([u, v]) => {
                            vh.refs.push(u / cam.width as Scalar);
                            vh.refs.push(v / cam.height as Scalar);
                            vh.hit.push(true);
                            *count += 1;
                        }
                        None => {
                            vh.refs.extend_from_slice(&[-1.0, -1.0]);
                            vh.hit.push(false);
                        }
                    }
                }
            }
            debug_assert_eq!(vh.hit.len(), vh.cells.len() * z);
            views.push(vh);
        }
        if hit_counts.iter().all(|&c| c == 0) {
            return Err(Error::Config(
                "degenerate camera rig: no camera sees any BEV cell".into(),
            ));
        }
        Ok(Self {
            num_cells: n,
            heights: heights.to_vec(),
            views,
            hit_counts,
        })
    }

    /// Per-view hit mask over `[cells, heights]`.
    pub fn hit_mask(&self, view: usize) -> Vec<bool> {
        let z = self.heights.len();
        let vh = &self.views[view];
        let mut mask = vec![false; self.num_cells * z];
        for (i, &cell) in vh.cells.iter().enumerate() {
            mask[cell * z..(cell + 1) * z].copy_from_slice(&vh.hit[i * z..(i + 1) * z]);
        }
        mask
    }
}

/// Rearranges backbone maps `[V, C, H, W]` into stacked channel-last token
/// rows `[V·H·W, C]`.
pub fn pv_tokens<'t>(features: Var<'t>) -> Result<Var<'t>> {
    let s = features.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("PV features must be [V,C,H,W], got {s:?}")));
    }
    let (v, c, hw) = (s[0], s[1], s[2] * s[3]);
    let per_view = (0..v)
        .map(|i| features.narrow(0, i, 1)?.reshape(vec![c, hw])?.t())
        .collect::<Result<Vec<_>>>()?;
    autodiff::concat(&per_view, 0)
}

/// Deformable cross-attention from BEV queries into the camera features.
///
/// For every camera, the cells it sees are gathered; each height of a cell's
/// pillar is a separate reference point with its own `K` offsets and its own
/// softmax over those `K` samples. The contributions of all hit
/// `(view, height)` pairs are averaged and projected; cells without any hit
/// receive exactly zero. Returns `[N, D]` (no residual).
pub fn cross_attend<'t>(
    cx: &Ctx<'t, '_>,
    att: &DeformAttention,
    queries: Var<'t>,
    tokens: Var<'t>,
    feature_dims: (usize, usize),
    sampling: &SpatialSampling,
) -> Result<Var<'t>> {
    let n = sampling.num_cells;
    let z = sampling.heights.len();
    let (h, k) = (att.heads, att.points);
    if att.levels != z {
        return Err(Error::Config(format!(
            "cross-attention has {} height groups, sampling has {z} heights",
            att.levels
        )));
    }
    if queries.shape() != [n, att.dim] {
        return Err(Error::shape("cross-attention queries", &queries.shape(), &[n, att.dim]));
    }
    let (fh, fw) = feature_dims;
    let hw = fh * fw;
    if tokens.shape()[0] != sampling.views.len() * hw {
        return Err(Error::Dimension(format!(
            "{} camera feature rows for {} cameras of {fh}×{fw}",
            tokens.shape()[0],
            sampling.views.len()
        )));
    }
    let offsets = att.offsets.forward(cx, queries)?.reshape(vec![n, h, z, k, 2])?;
    let weights = att.logits.forward(cx, queries)?.reshape(vec![n, h, z, k])?.softmax(3)?;
    let values = att.value_proj.forward(cx, tokens)?;
    let scale = cx.constant(Tensor::new(vec![1, 1, 1, 1, 2], vec![1.0 / fw as Scalar, 1.0 / fh as Scalar])?);

    let mut acc: Option<Var<'t>> = None;
    for (view, vh) in sampling.views.iter().enumerate() {
        let m = vh.cells.len();
        if m == 0 {
            continue;
        }
        let refs = cx.constant(Tensor::new(vec![m, 1, z, 1, 2], vh.refs.clone())?);
        let points = offsets
            .index_select(0, &vh.cells)?
            .mul(scale)?
            .add(refs)?
            .reshape(vec![m, h, 1, z * k, 2])?;
        let gate: Vec<Scalar> = vh
            .cells
            .iter()
            .enumerate()
            .flat_map(|(i, &cell)| {
                let count = sampling.hit_counts[cell] as Scalar;
                vh.hit[i * z..(i + 1) * z].iter().map(move |&hit| if hit { 1.0 / count } else { 0.0 })
            })
            .collect();
        let gate = cx.constant(Tensor::new(vec![m, 1, z, 1], gate)?);
        let w = weights
            .index_select(0, &vh.cells)?
            .mul(gate)?
            .reshape(vec![m, h, 1, z * k])?;
        let value = values.narrow(0, view * hw, hw)?;
        let sampled = autodiff::deform_sample(value, &[(fh, fw)], points, w)?.scatter_add_rows(&vh.cells, n)?;
        acc = Some(match acc {
            Some(a) => a.add(sampled)?,
            None => sampled,
        });
    }
    let acc = acc.expect("sampling guarantees at least one hit");
    let mask: Vec<Scalar> = sampling
        .hit_counts
        .iter()
        .map(|&c| if c > 0 { 1.0 } else { 0.0 })
        .collect();
    att.out_proj
        .forward(cx, acc)?
        .mul(cx.constant(Tensor::new(vec![n, 1], mask)?))
}
