//! Ray-cast renderer for flat ground with painted markings.
//!
//! Each pixel casts one ray from the camera centre; the first surface it
//! meets is the ground plane (the only surface), so ray casting gives the
//! same visibility as z-buffered ground rasterization. Markings are
//! anti-aliased by blending over the pixel's ground footprint.

use super::Image;
use crate::geometry::{Camera, Pose2, Vec2};
use crate::tensor::Scalar;

const SKY: Scalar = 0.0;
const GROUND: Scalar = 0.4;
const PAINT: Scalar = 0.95;
/// Segments per culling chunk.
const CHUNK: usize = 8;

/// World-frame marking polylines of one scene.
pub(crate) struct Markings<'a> {
    pub lines: &'a [Vec<Vec2>],
    pub line_half_width: Scalar,
    pub stripes: &'a [Vec<Vec2>],
    pub stripe_half_width: Scalar,
}

struct Chunk {
    lo: Vec2,
    hi: Vec2,
    half_width: Scalar,
    points: Vec<Vec2>,
}

fn chunks(markings: &Markings<'_>) -> Vec<Chunk> {
    let mut out = Vec::new();
    let groups = [
        (markings.lines, markings.line_half_width),
        (markings.stripes, markings.stripe_half_width),
    ];
    for (polylines, half_width) in groups {
        for line in polylines {
            let mut start = 0;
            while start + 1 < line.len() {
                let end = (start + CHUNK).min(line.len() - 1);
                let points = line[start..=end].to_vec();
                let mut lo = [Scalar::INFINITY; 2];
                let mut hi = [Scalar::NEG_INFINITY; 2];
                for p in &points {
                    for d in 0..2 {
                        lo[d] = lo[d].min(p[d]);
                        hi[d] = hi[d].max(p[d]);
                    }
                }
                out.push(Chunk {
                    lo,
                    hi,
                    half_width,
                    points,
                });
                start = end;
            }
        }
    }
    out
}

fn segment_distance(p: Vec2, a: Vec2, b: Vec2) -> Scalar {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ex, ey) = (p[0] - a[0] - t * dx, p[1] - a[1] - t * dy);
    (ex * ex + ey * ey).sqrt()
}

/// Paint coverage of a pixel whose ground footprint has size `footprint`.
fn coverage(chunks: &[Chunk], p: Vec2, footprint: Scalar) -> Scalar {
    let mut best: Scalar = 0.0;
    for chunk in chunks {
        let margin = chunk.half_width + footprint;
        if p[0] < chunk.lo[0] - margin || p[0] > chunk.hi[0] + margin || p[1] < chunk.lo[1] - margin || p[1] > chunk.hi[1] + margin {
            continue;
        }
        for w in chunk.points.windows(2) {
            let d = segment_distance(p, w[0], w[1]);
            let c = (0.5 + (chunk.half_width - d) / footprint).clamp(0.0, 1.0);
            best = best.max(c);
        }
    }
    best
}

/// Renders one camera view of the ground as seen from `pose`.
pub(crate) fn render_view(camera: &Camera, pose: &Pose2, markings: &Markings<'_>) -> Image {
    let chunks = chunks(markings);
    let (w, h) = (camera.width, camera.height);
    let mut data = Vec::with_capacity(w * h);
    let origin = camera.translation;
    for v in 0..h {
        for u in 0..w {
            let ray = camera.ray(u as Scalar + 0.5, v as Scalar + 0.5);
            let value = if ray[2] >= -1e-9 {
                SKY
            } else {
                let t = -origin[2] / ray[2];
                let ground = [origin[0] + t * ray[0], origin[1] + t * ray[1]];
                // Pixel footprint on the ground, stretched at grazing angles.
                let footprint = t / camera.intrinsics.fx / (-ray[2]).sqrt();
                let paint = coverage(&chunks, pose.to_world(ground), footprint.max(1e-3));
                GROUND + (PAINT - GROUND) * paint
            };
            data.push((value * 255.0).round() as u8);
        }
    }
    Image {
        width: w,
        height: h,
        data,
    }
}
