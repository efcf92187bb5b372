//! Plain-text + PGM dataset format.
//!
//! ```text
//! <dir>/manifest.txt                 version line, then one `scene` line per scene
//! <dir>/<id>/annotations.txt         CAM, EGO and SEG lines, terminated by END
//! <dir>/<id>/frame_<t>_cam_<k>.pgm   binary 8-bit grayscale
//! ```
//!
//! Floats are written with 9 significant digits; generated scenes are
//! already quantized to that precision, so a round trip is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{validate_scene, Image, MultiViewFrame, ScenarioKind, Scene, NUM_CAMERAS};
use crate::error::{Error, Result};
use crate::geometry::{Camera, Intrinsics, Pose2, Vec2};
use crate::heads_loss::LaneSegment;
use crate::tensor::Scalar;

pub const FORMAT_VERSION: u32 = 1;

fn float(s: &mut String, v: Scalar) {
    let _ = write!(s, " {v:.8e}");
}

fn image_path(dir: &Path, frame: usize, cam: usize) -> PathBuf {
    dir.join(format!("frame_{frame}_cam_{cam}.pgm"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn annotations(scene: &Scene) -> String {
    let mut s = String::new();
    for (k, cam) in scene.cameras.iter().enumerate() {
        let _ = write!(s, "CAM {k}");
        let i = &cam.intrinsics;
        for v in [i.fx, i.fy, i.cx, i.cy] {
            float(&mut s, v);
        }
        for row in &cam.rotation {
            for &v in row {
                float(&mut s, v);
            }
        }
        for v in cam.translation {
            float(&mut s, v);
        }
        s.push('\n');
    }
    for frame in &scene.frames {
        let _ = write!(s, "EGO {}", frame.timestamp);
        for v in [frame.pose.x, frame.pose.y, frame.pose.yaw] {
            float(&mut s, v);
        }
        s.push('\n');
    }
    for frame in &scene.frames {
        for seg in &frame.lanes {
            let _ = write!(s, "SEG {} {} {}", frame.timestamp, seg.class_id, seg.points());
            for (i, line) in [&seg.centerline, &seg.left, &seg.right].into_iter().enumerate() {
                if i > 0 {
                    s.push_str(" |");
                }
                for p in line {
                    float(&mut s, p[0]);
                    float(&mut s, p[1]);
                }
            }
            s.push('\n');
        }
    }
    s.push_str("END\n");
    s
}

fn pgm(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

/// Writes `scenes` under `dir`, creating it if needed.
pub fn save_dataset(scenes: &[Scene], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("version {FORMAT_VERSION}\n");
    for scene in scenes {
        validate_scene(scene)?;
        let _ = writeln!(
            manifest,
            "scene {} {} {} {}",
            scene.id,
            scene.kind.name(),
            scene.seed,
            scene.frames.len()
        );
        let sdir = dir.join(&scene.id);
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        write_file(&sdir.join("annotations.txt"), annotations(scene).as_bytes())?;
        for frame in &scene.frames {
            for (k, image) in frame.images.iter().enumerate() {
                write_file(&image_path(&sdir, frame.timestamp, k), &pgm(image))?;
            }
        }
    }
    write_file(&dir.join("manifest.txt"), manifest.as_bytes())
}

/// Whitespace-separated tokens of a text file with their byte offsets.
struct Lines<'a> {
    path: &'a Path,
    text: &'a str,
}

struct Line<'a> {
    path: &'a Path,
    end: usize,
    tokens: Vec<(usize, &'a str)>,
    next: usize,
}

impl<'a> Lines<'a> {
    fn iter(&self) -> impl Iterator<Item = Line<'a>> + '_ {
        let mut offset = 0;
        let path = self.path;
        self.text.split_inclusive('\n').map(move |raw| {
            let base = offset;
            offset += raw.len();
            let mut tokens = Vec::new();
            let mut start = None;
            for (i, ch) in raw.char_indices() {
                match (ch.is_whitespace(), start) {
                    (false, None) => start = Some(i),
                    (true, Some(s)) => {
                        tokens.push((base + s, &raw[s..i]));
                        start = None;
                    }
                    _ => {}
                }
            }
            if let Some(s) = start {
                tokens.push((base + s, &raw[s..]));
            }
            Line {
                path,
                end: base + raw.trim_end_matches('\n').len(),
                tokens,
                next: 0,
            }
        })
    }

    fn error(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset,
            msg: msg.into(),
        }
    }
}

impl<'a> Line<'a> {
    fn error(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset,
            msg: msg.into(),
        }
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.next).map_or(self.end, |t| t.0)
    }

    fn token(&mut self, what: &str) -> Result<&'a str> {
        let t = self.tokens.get(self.next).copied();
        match t {
            Some((_, s)) => {
                self.next += 1;
                Ok(s)
            }
            None => Err(self.error(self.end, format!("expected {what}, found end of line"))),
        }
    }

    fn parse<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let at = self.offset();
        let s = self.token(what)?;
        s.parse().map_err(|_| self.error(at, format!("invalid {what} `{s}`")))
    }

    fn float(&mut self) -> Result<Scalar> {
        let at = self.offset();
        let v: Scalar = self.parse("number")?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.error(at, "non-finite number"))
        }
    }

    fn literal(&mut self, want: &str) -> Result<()> {
        let at = self.offset();
        let s = self.token(want)?;
        if s == want {
            Ok(())
        } else {
            Err(self.error(at, format!("expected `{want}`, found `{s}`")))
        }
    }

    fn finish(&self) -> Result<()> {
        match self.tokens.get(self.next) {
            Some(&(at, s)) => Err(self.error(at, format!("unexpected trailing token `{s}`"))),
            None => Ok(()),
        }
    }

    fn points(&mut self, count: usize) -> Result<Vec<Vec2>> {
        (0..count).map(|_| Ok([self.float()?, self.float()?])).collect()
    }
}

fn read_text(path: &Path) -> Result<String> {
    match fs::read(path) {
        Ok(bytes) => String::from_utf8(bytes).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            offset: e.utf8_error().valid_up_to(),
            msg: "invalid UTF-8".into(),
        }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::Inventory(path.to_path_buf())),
        Err(e) => Err(Error::io(path, e)),
    }
}

struct ManifestEntry {
    id: String,
    kind: ScenarioKind,
    seed: u64,
    frames: usize,
}

fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = read_text(path)?;
    let lines = Lines { path, text: &text };
    let mut it = lines.iter().filter(|l| !l.tokens.is_empty());
    let mut head = it.next().ok_or_else(|| lines.error(0, "empty manifest"))?;
    head.literal("version")?;
    let found = head.token("format version")?;
    if found != FORMAT_VERSION.to_string() {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: found.to_string(),
            supported: FORMAT_VERSION,
        });
    }
    head.finish()?;
    let mut entries = Vec::new();
    for mut line in it {
        line.literal("scene")?;
        let id = line.token("scene id")?.to_string();
        let at = line.offset();
        let kind_name = line.token("scenario kind")?;
        let kind = ScenarioKind::from_name(kind_name).ok_or_else(|| line.error(at, format!("unknown scenario kind `{kind_name}`")))?;
        let seed = line.parse("seed")?;
        let at = line.offset();
        let frames: usize = line.parse("frame count")?;
        if frames == 0 {
            return Err(line.error(at, "scene has no frames"));
        }
        line.finish()?;
        entries.push(ManifestEntry { id, kind, seed, frames });
    }
    Ok(entries)
}

fn parse_pgm(path: &Path) -> Result<Image> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::Inventory(path.to_path_buf())),
        Err(e) => return Err(Error::io(path, e)),
    };
    let err = |offset: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    };
    // Header: magic, width, height, maxval, each followed by whitespace.
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "truncated PGM header"));
        }
        fields.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
    }
    if fields[0].1 != "P5" {
        return Err(err(fields[0].0, "expected binary PGM magic `P5`"));
    }
    let dim = |i: usize| fields[i].1.parse::<usize>().map_err(|_| err(fields[i].0, "invalid PGM header field"));
    let (width, height, maxval) = (dim(1)?, dim(2)?, dim(3)?);
    if maxval != 255 {
        return Err(err(fields[3].0, "only 8-bit PGM is supported"));
    }
    pos += 1;
    let data = bytes.get(pos..).unwrap_or(&[]);
    if data.len() != width * height {
        return Err(err(bytes.len(), "PGM pixel data length does not match the header"));
    }
    Ok(Image {
        width,
        height,
        data: data.to_vec(),
    })
}

fn parse_scene(dir: &Path, entry: &ManifestEntry) -> Result<Scene> {
    let sdir = dir.join(&entry.id);
    let path = sdir.join("annotations.txt");
    let text = read_text(&path)?;
    let lines = Lines { path: &path, text: &text };
    let mut cams: Vec<Option<(Intrinsics, [[Scalar; 3]; 3], [Scalar; 3])>> = vec![None; NUM_CAMERAS];
    let mut poses: Vec<Option<Pose2>> = vec![None; entry.frames];
    let mut lanes: Vec<Vec<LaneSegment>> = vec![Vec::new(); entry.frames];
    let mut ended = false;
    for mut line in lines.iter().filter(|l| !l.tokens.is_empty()) {
        if ended {
            return Err(line.error(line.offset(), "content after END"));
        }
        let at = line.offset();
        match line.token("record type")? {
            "CAM" => {
                let at = line.offset();
                let k: usize = line.parse("camera index")?;
                if k >= NUM_CAMERAS || cams[k].is_some() {
                    return Err(line.error(at, format!("bad or duplicate camera index {k}")));
                }
                let intr = Intrinsics {
                    fx: line.float()?,
                    fy: line.float()?,
                    cx: line.float()?,
                    cy: line.float()?,
                };
                let mut rot = [[0.0; 3]; 3];
                for row in rot.iter_mut() {
                    for v in row.iter_mut() {
                        *v = line.float()?;
                    }
                }
                let trans = [line.float()?, line.float()?, line.float()?];
                cams[k] = Some((intr, rot, trans));
            }
            "EGO" => {
                let at = line.offset();
                let t: usize = line.parse("frame index")?;
                if t >= entry.frames || poses[t].is_some() {
                    return Err(line.error(at, format!("bad or duplicate frame index {t}")));
                }
                poses[t] = Some(Pose2 {
                    x: line.float()?,
                    y: line.float()?,
                    yaw: line.float()?,
                });
            }
            "SEG" => {
                let at = line.offset();
                let t: usize = line.parse("frame index")?;
                if t >= entry.frames {
                    return Err(line.error(at, format!("frame index {t} out of range")));
                }
                let class_id = line.parse("class")?;
                let at = line.offset();
                let count: usize = line.parse("point count")?;
                if count < 2 {
                    return Err(line.error(at, "a segment needs at least 2 points"));
                }
                let centerline = line.points(count)?;
                line.literal("|")?;
                let left = line.points(count)?;
                line.literal("|")?;
                let right = line.points(count)?;
                lanes[t].push(LaneSegment {
                    centerline,
                    left,
                    right,
                    class_id,
                    score: 1.0,
                });
            }
            "END" => ended = true,
            other => return Err(line.error(at, format!("unknown record `{other}`"))),
        }
        line.finish()?;
    }
    if !ended {
        return Err(lines.error(text.len(), "missing END record (truncated file?)"));
    }
    if let Some(k) = cams.iter().position(Option::is_none) {
        return Err(lines.error(text.len(), format!("missing CAM record for camera {k}")));
    }
    if let Some(t) = poses.iter().position(Option::is_none) {
        return Err(lines.error(text.len(), format!("missing EGO record for frame {t}")));
    }

    let mut frames = Vec::with_capacity(entry.frames);
    for (t, (pose, lanes)) in poses.into_iter().zip(lanes).enumerate() {
        let images = (0..NUM_CAMERAS)
            .map(|k| parse_pgm(&image_path(&sdir, t, k)))
            .collect::<Result<Vec<_>>>()?;
        frames.push(MultiViewFrame {
            timestamp: t,
            pose: pose.expect("checked above"),
            images,
            lanes,
        });
    }
    let cameras = cams
        .into_iter()
        .zip(&frames[0].images)
        .map(|(c, img)| {
            let (intrinsics, rotation, translation) = c.expect("checked above");
            Camera {
                intrinsics,
                width: img.width,
                height: img.height,
                rotation,
                translation,
            }
        })
        .collect();
    let scene = Scene {
        id: entry.id.clone(),
        kind: entry.kind,
        seed: entry.seed,
        cameras,
        frames,
    };
    validate_scene(&scene)?;
    Ok(scene)
}

/// Loads every scene listed in `<dir>/manifest.txt`, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let entries = parse_manifest(&dir.join("manifest.txt"))?;
    entries.iter().map(|e| parse_scene(dir, e)).collect()
}
