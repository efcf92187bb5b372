//! Planar ego motion, the metric BEV grid, and the pinhole camera model.
//!
//! Ego frame: x forward, y left, z up (metres). Camera frame: x right,
//! y down, z along the optical axis.

use crate::tensor::Scalar;

pub type Vec2 = [Scalar; 2];
pub type Vec3 = [Scalar; 3];
pub type Mat3 = [[Scalar; 3]; 3];

/// Metric area covered by the BEV grid, ego-centred.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevExtent {
    pub x_min: Scalar,
    pub x_max: Scalar,
    pub y_min: Scalar,
    pub y_max: Scalar,
}

impl BevExtent {
    pub fn x_span(&self) -> Scalar {
        self.x_max - self.x_min
    }

    pub fn y_span(&self) -> Scalar {
        self.y_max - self.y_min
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }

    /// Normalized `(u, v)`: `u` runs along y (grid columns), `v` along x
    /// (grid rows).
    pub fn to_normalized(&self, p: Vec2) -> Vec2 {
        [(p[1] - self.y_min) / self.y_span(), (p[0] - self.x_min) / self.x_span()]
    }

    pub fn from_normalized(&self, uv: Vec2) -> Vec2 {
        [self.x_min + uv[1] * self.x_span(), self.y_min + uv[0] * self.y_span()]
    }
}

impl Default for BevExtent {
    fn default() -> Self {
        Self {
            x_min: -24.0,
            x_max: 24.0,
            y_min: -12.0,
            y_max: 12.0,
        }
    }
}

/// Shape of the BEV grid. Row `r` spans x, column `c` spans y; cells are
/// flattened row-major (`index = r * cols + c`), with row 0 at `x_min`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevGeometry {
    pub rows: usize,
    pub cols: usize,
    pub extent: BevExtent,
}

impl BevGeometry {
    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell_index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn cell_center(&self, index: usize) -> Vec2 {
        let (row, col) = (index / self.cols, index % self.cols);
        self.extent.from_normalized(self.cell_normalized(row, col))
    }

    pub fn cell_normalized(&self, row: usize, col: usize) -> Vec2 {
        [
            (col as Scalar + 0.5) / self.cols as Scalar,
            (row as Scalar + 0.5) / self.rows as Scalar,
        ]
    }

    /// Normalized reference point of every cell, `[N, 2]` flattened.
    pub fn reference_points(&self) -> Vec<Scalar> {
        let mut out = Vec::with_capacity(2 * self.num_cells());
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.extend_from_slice(&self.cell_normalized(r, c));
            }
        }
        out
    }
}

impl Default for BevGeometry {
    fn default() -> Self {
        Self {
            rows: 25,
            cols: 13,
            extent: BevExtent::default(),
        }
    }
}

/// Planar pose in the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose2 {
    pub x: Scalar,
    pub y: Scalar,
    pub yaw: Scalar,
}

impl Pose2 {
    /// Maps an ego-frame point to the world frame.
    pub fn to_world(&self, p: Vec2) -> Vec2 {
        let (s, c) = self.yaw.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// Maps a world point into this ego frame.
    pub fn to_ego(&self, p: Vec2) -> Vec2 {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }
}

/// Rigid planar transform taking current-frame coordinates to the previous
/// ego frame: `p_prev = R(dyaw) · p_cur + (dx, dy)`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct EgoMotion {
    pub dx: Scalar,
    pub dy: Scalar,
    pub dyaw: Scalar,
}

impl EgoMotion {
    pub fn identity() -> Self {
        Self::default()
    }

    /// Motion between two world poses, previous → current.
    pub fn between(prev: Pose2, cur: Pose2) -> Self {
        let t = prev.to_ego([cur.x, cur.y]);
        Self {
            dx: t[0],
            dy: t[1],
            dyaw: cur.yaw - prev.yaw,
        }
    }

    pub fn apply(&self, p: Vec2) -> Vec2 {
        let (s, c) = self.dyaw.sin_cos();
        [c * p[0] - s * p[1] + self.dx, s * p[0] + c * p[1] + self.dy]
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = self.dyaw.sin_cos();
        // R(-yaw) · (-t)
        Self {
            dx: -(c * self.dx + s * self.dy),
            dy: -(-s * self.dx + c * self.dy),
            dyaw: -self.dyaw,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: Scalar,
    pub fy: Scalar,
    pub cx: Scalar,
    pub cy: Scalar,
}

/// Pinhole camera rigidly mounted on the ego vehicle.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
    /// Camera-to-ego rotation; columns are the camera axes in ego coordinates.
    pub rotation: Mat3,
    /// Camera centre in ego coordinates.
    pub translation: Vec3,
}

impl Camera {
    /// Camera at `position`, looking along heading `yaw` (radians, CCW from
    /// ego x) and pitched down by `pitch` radians, with no roll.
    pub fn mounted(intrinsics: Intrinsics, width: usize, height: usize, position: Vec3, yaw: Scalar, pitch: Scalar) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let forward = [cp * cy, cp * sy, -sp];
        let right = [sy, -cy, 0.0];
        let down = cross(forward, right);
        let rotation = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        Self {
            intrinsics,
            width,
            height,
            rotation,
            translation: position,
        }
    }

    /// Ego-frame point in camera coordinates.
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let d = [
            p[0] - self.translation[0],
            p[1] - self.translation[1],
            p[2] - self.translation[2],
        ];
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    /// Pixel coordinates of an ego-frame point, or `None` when it is behind
    /// the camera or lands outside the image.
    pub fn project(&self, p: Vec3) -> Option<Vec2> {
        let c = self.to_camera(p);
        if c[2] <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        let u = k.fx * c[0] / c[2] + k.cx;
        let v = k.fy * c[1] / c[2] + k.cy;
        let inside = u >= 0.0 && v >= 0.0 && u < self.width as Scalar && v < self.height as Scalar;
        inside.then_some([u, v])
    }

    /// Unit ray direction in ego coordinates through pixel `(u, v)`.
    pub fn ray(&self, u: Scalar, v: Scalar) -> Vec3 {
        let k = &self.intrinsics;
        let d = [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0];
        let r = &self.rotation;
        let w = [
            r[0][0] * d[0] + r[0][1] * d[1] + r[0][2] * d[2],
            r[1][0] * d[0] + r[1][1] * d[1] + r[1][2] * d[2],
            r[2][0] * d[0] + r[2][1] * d[1] + r[2][2] * d[2],
        ];
        let n = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        [w[0] / n, w[1] / n, w[2] / n]
    }
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn det3(m: &Mat3) -> Scalar {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}
