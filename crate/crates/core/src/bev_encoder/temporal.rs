use crate::autodiff::kernels::{self, MapDims, MapLayout};
use crate::error::{Error, Result};
use crate::geometry::{BevGeometry, EgoMotion};
use crate::tensor::{Scalar, Tensor};

/// Resamples the previous frame's BEV `[N, D]` onto the current grid.
///
/// Each current cell centre is mapped into the previous ego frame with
/// `motion` and the history is bilinearly sampled there; cells that map
/// outside the previous grid become zero. The result carries no gradient.
pub fn warp_history(history: &Tensor, geometry: &BevGeometry, motion: &EgoMotion) -> Result<Tensor> {
    let n = geometry.num_cells();
    if history.ndim() != 2 || history.shape()[0] != n {
        return Err(Error::Dimension(format!(
            "history BEV has shape {:?}, grid has {} cells",
            history.shape(),
            n
        )));
    }
    if *motion == EgoMotion::identity() {
        return Ok(history.clone());
    }
    let d = history.shape()[1];
    let mut points = Vec::with_capacity(2 * n);
    for i in 0..n {
        let prev = motion.apply(geometry.cell_center(i));
        points.extend_from_slice(&geometry.extent.to_normalized(prev));
    }
    let dims = MapDims {
        channels: d,
        height: geometry.rows,
        width: geometry.cols,
        layout: MapLayout::ChannelLast,
    };
    let mut out = vec![0.0 as Scalar; n * d];
    kernels::bilinear_forward(&dims, history.data(), &points, &mut out);
    Tensor::new(vec![n, d], out)
}
