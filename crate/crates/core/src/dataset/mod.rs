//! Procedural multi-camera driving scenes with lane-segment groundtruth, and
//! their on-disk format.

mod io;
mod render;
mod road;


pub use io::{load_dataset, save_dataset, FORMAT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{BevExtent, Camera, Intrinsics, Pose2};
use crate::heads_loss::{LaneSegment, CLASS_CROSSING, CLASS_LANE};
use crate::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use road::{LaneSpec, Road};

/// Camera order of every frame.
pub const CAMERA_NAMES: [&str; 7] = [
    "front",
    "front-left",
    "front-right",
    "back-left",
    "back-right",
    "back",
    "front-center-narrow",
];
pub const NUM_CAMERAS: usize = CAMERA_NAMES.len();

/// Upper bound on groundtruth segments per frame.
pub const MAX_SEGMENTS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScenarioKind {
    Straight,
    Curve,
    Intersection,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [ScenarioKind::Straight, ScenarioKind::Curve, ScenarioKind::Intersection];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Straight => "straight",
            ScenarioKind::Curve => "curve",
            ScenarioKind::Intersection => "intersection",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    /// `[1, H, W]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&b| b as Scalar / 255.0).collect();
        Tensor::new(vec![1, self.height, self.width], data).expect("image buffer matches its shape")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewFrame {
    pub timestamp: usize,
    /// Ego pose in the world frame.
    pub pose: Pose2,
    /// One image per camera, in [`CAMERA_NAMES`] order.
    pub images: Vec<Image>,
    /// Groundtruth in this frame's ego coordinates.
    pub lanes: Vec<LaneSegment>,
}

/// A short sequence seen by a fixed camera rig.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub kind: ScenarioKind,
    pub seed: u64,
    pub cameras: Vec<Camera>,
    pub frames: Vec<MultiViewFrame>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenParams {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub points: usize,
    pub extent: BevExtent,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            width: 96,
            height: 64,
            frames: 4,
            points: 10,
            extent: BevExtent::default(),
        }
    }
}

/// Rounds to the 9 significant digits used on disk, so that generated
/// scenes survive a save/load round trip bit-exactly.
pub fn quantize(v: Scalar) -> Scalar {
    format!("{v:.8e}").parse().expect("formatted float parses")
}

/// The 7-camera rig: six wide cameras around the vehicle plus a narrow
/// forward camera. Each wide camera sits 1 m behind the rig centre along its
/// own viewing direction at 2 m height, pitched 30 degrees down, so that the
/// ground directly around the vehicle is covered too.
pub fn camera_rig(width: usize, height: usize) -> Vec<Camera> {
    let deg = std::f64::consts::PI / 180.0;
    let wide = (width as Scalar / 2.0) / (55.0 * deg).tan();
    let narrow = (width as Scalar / 2.0) / (30.0 * deg).tan();
    let yaws = [0.0, 60.0, -60.0, 130.0, -130.0, 180.0];
    let mut cams: Vec<Camera> = yaws
        .iter()
        .map(|&y| {
            let yaw = y * deg;
            let pos = [-yaw.cos(), -yaw.sin(), 2.0];
            rig_camera(wide, width, height, pos, yaw, 30.0 * deg)
        })
        .collect();
    cams.push(rig_camera(narrow, width, height, [0.0, 0.0, 2.0], 0.0, 10.0 * deg));
    cams
}

fn rig_camera(focal: Scalar, width: usize, height: usize, pos: [Scalar; 3], yaw: Scalar, pitch: Scalar) -> Camera {
    let k = Intrinsics {
        fx: quantize(focal),
        fy: quantize(focal),
        cx: width as Scalar / 2.0,
        cy: height as Scalar / 2.0,
    };
    let mut cam = Camera::mounted(k, width, height, pos.map(quantize), yaw, pitch);
    for row in cam.rotation.iter_mut() {
        for v in row.iter_mut() {
            *v = quantize(*v);
        }
    }
    cam
}

/// Generates one scene; fully determined by `(seed, kind, params)`.
pub fn generate_scene(seed: u64, kind: ScenarioKind, params: &GenParams) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lanes = rng.gen_range(2..=6usize);
    let width = rng.gen_range(3.0..4.0);
    let ego_lane = rng.gen_range(0..lanes);
    let speed = rng.gen_range(1.0..2.5);
    let curvature = match kind {
        ScenarioKind::Curve => {
            let radius = rng.gen_range(60.0..150.0);
            if rng.gen_bool(0.5) {
                1.0 / radius
            } else {
                -1.0 / radius
            }
        }
        _ => 0.0,
    };
    let travel = speed * params.frames as Scalar;
    let main = Road {
        origin: [0.0, 0.0],
        heading: 0.0,
        curvature,
        s_range: (-60.0, 60.0 + travel),
    };
    // Lane `i` counted from the right road edge; offsets are left-positive.
    let offset = |i: usize| (i as Scalar - (lanes as Scalar - 1.0) / 2.0) * width;
    let mut specs: Vec<LaneSpec> = (0..lanes)
        .map(|i| LaneSpec {
            road: main,
            offset: offset(i),
            half_width: width / 2.0,
            class_id: CLASS_LANE,
        })
        .collect();
    let mut markings: Vec<Vec<[Scalar; 2]>> = (0..=lanes)
        .map(|i| main.polyline(offset(i) - width / 2.0, 1.0))
        .collect();
    let mut stripes: Vec<Vec<[Scalar; 2]>> = Vec::new();

    if kind == ScenarioKind::Intersection {
        let cross_lanes = rng.gen_range(2..=4usize);
        let cross_width = rng.gen_range(3.0..4.0);
        let centre_x = rng.gen_range(8.0..16.0);
        let road_half = lanes as Scalar * width / 2.0;
        let cross = Road {
            origin: [centre_x, 0.0],
            heading: std::f64::consts::FRAC_PI_2,
            curvature: 0.0,
            s_range: (-60.0, 60.0),
        };
        let cross_offset = |j: usize| (j as Scalar - (cross_lanes as Scalar - 1.0) / 2.0) * cross_width;
        for j in 0..cross_lanes {
            specs.push(LaneSpec {
                road: cross,
                offset: cross_offset(j),
                half_width: cross_width / 2.0,
                class_id: CLASS_LANE,
            });
        }
        for j in 0..=cross_lanes {
            markings.push(cross.polyline(cross_offset(j) - cross_width / 2.0, 1.0));
        }
        // Crosswalks span the main road on both sides of the junction.
        let cross_half = cross_lanes as Scalar * cross_width / 2.0;
        for side in [-1.0, 1.0] {
            let x = centre_x + side * (cross_half + 2.5);
            let walk = Road {
                origin: [x, 0.0],
                heading: std::f64::consts::FRAC_PI_2,
                curvature: 0.0,
                s_range: (-road_half, road_half),
            };
            specs.push(LaneSpec {
                road: walk,
                offset: 0.0,
                half_width: 1.5,
                class_id: CLASS_CROSSING,
            });
            let mut y = -road_half + 0.5;
            while y < road_half {
                stripes.push(vec![[x - 1.5, y], [x + 1.5, y]]);
                y += 1.0;
            }
        }
    }

    let cameras = camera_rig(params.width, params.height);
    let ego_offset = offset(ego_lane);
    let mut frames = Vec::with_capacity(params.frames);
    for t in 0..params.frames {
        let s = t as Scalar * speed;
        let [x, y] = main.point(s, ego_offset);
        let pose = Pose2 {
            x: quantize(x),
            y: quantize(y),
            yaw: quantize(main.heading_at(s)),
        };
        let mut lanes_gt: Vec<LaneSegment> = specs
            .iter()
            .filter_map(|spec| spec.groundtruth(&pose, &params.extent, params.points))
            .collect();
        lanes_gt.truncate(MAX_SEGMENTS);
        let scene_markings = render::Markings {
            lines: &markings,
            line_half_width: 0.2,
            stripes: &stripes,
            stripe_half_width: 0.25,
        };
        let images = cameras.iter().map(|cam| render::render_view(cam, &pose, &scene_markings)).collect();
        frames.push(MultiViewFrame {
            timestamp: t,
            pose,
            images,
            lanes: lanes_gt,
        });
    }
    Scene {
        id: scene_id(seed),
        kind,
        seed,
        cameras,
        frames,
    }
}

pub fn scene_id(seed: u64) -> String {
    format!("scene_{seed:08}")
}

/// Scenes for seeds `first_seed..first_seed + count`, cycling through the
/// scenario kinds.
pub fn generate_dataset(first_seed: u64, count: usize, params: &GenParams) -> Vec<Scene> {
    (0..count)
        .map(|i| {
            let seed = first_seed + i as u64;
            generate_scene(seed, ScenarioKind::ALL[(seed % 3) as usize], params)
        })
        .collect()
}

/// Train/test split from disjoint seed ranges.
pub fn generate_split(first_seed: u64, train: usize, test: usize, params: &GenParams) -> (Vec<Scene>, Vec<Scene>) {
    (
        generate_dataset(first_seed, train, params),
        generate_dataset(first_seed + train as u64, test, params),
    )
}

/// Checks the cross-field invariants of a loaded or generated scene.
pub fn validate_scene(scene: &Scene) -> Result<()> {
    if scene.cameras.len() != NUM_CAMERAS {
        return Err(Error::Input(format!("scene {} has {} cameras", scene.id, scene.cameras.len())));
    }
    if scene.frames.is_empty() {
        return Err(Error::Input(format!("scene {} has no frames", scene.id)));
    }
    for frame in &scene.frames {
        if frame.images.len() != NUM_CAMERAS {
            return Err(Error::Input(format!("scene {} frame {} is missing views", scene.id, frame.timestamp)));
        }
        for (img, cam) in frame.images.iter().zip(&scene.cameras) {
            if img.width != cam.width || img.height != cam.height {
                return Err(Error::Input(format!("scene {}: image size differs from camera", scene.id)));
            }
        }
    }
    Ok(())
}
