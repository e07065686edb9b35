//! Procedural scenes, camera rigs, analytic ground truth and dataset I/O.
//!
//! A dataset directory holds `scene.json`, `poses.json` and `train/` and
//! `test/` image folders. Every image is written twice: a PNG (8-bit RGB, or
//! 16-bit depth scaled by `depth_scale`) and a raw little-endian f32 sidecar
//! with the exact values. Loading prefers the sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Aabb, FieldSample, SIGMA_FLOOR};
use crate::render::{Camera, Ray, RenderMode, SampleSource};

/// Meters per 16-bit depth unit.
pub const DEFAULT_DEPTH_SCALE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere {
        name: String,
        center: [f64; 3],
        radius: f64,
        albedo: [f64; 3],
    },
    Box {
        name: String,
        center: [f64; 3],
        half_size: [f64; 3],
        albedo: [f64; 3],
    },
}

impl Primitive {
    pub fn albedo(&self) -> [f64; 3] {
        match self {
            Primitive::Sphere { albedo, .. } | Primitive::Box { albedo, .. } => *albedo,
        }
    }

    fn extent(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Primitive::Sphere { center, radius, .. } => (
                center.map(|c| c - radius),
                center.map(|c| c + radius),
            ),
            Primitive::Box { center, half_size, .. } => (
                std::array::from_fn(|a| center[a] - half_size[a]),
                std::array::from_fn(|a| center[a] + half_size[a]),
            ),
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                (p - Vector3::from(*center)).norm_squared() <= radius * radius
            }
            Primitive::Box { center, half_size, .. } => {
                (0..3).all(|a| (p[a] - center[a]).abs() <= half_size[a])
            }
        }
    }

    /// Nearest hit distance in front of the ray origin.
    pub fn intersect(&self, ray: &Ray) -> Option<f64> {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                let oc = ray.origin - Vector3::from(*center);
                let b = oc.dot(&ray.direction);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                [-b - sq, -b + sq].into_iter().find(|t| *t > 0.0)
            }
            Primitive::Box { center, half_size, .. } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for a in 0..3 {
                    let lo = center[a] - half_size[a];
                    let hi = center[a] + half_size[a];
                    let d = ray.direction[a];
                    let o = ray.origin[a];
                    if d.abs() < 1e-300 {
                        if o < lo || o > hi {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((lo - o) / d, (hi - o) / d);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    t0 = t0.max(ta);
                    t1 = t1.min(tb);
                }
                if t0 > t1 {
                    None
                } else if t0 > 0.0 {
                    Some(t0)
                } else if t1 > 0.0 {
                    Some(t1)
                } else {
                    None
                }
            }
        }
    }
}

/// Primitives inside world bounds, seen against a flat background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub bounds: Aabb,
    pub background: [f64; 3],
}

impl SceneSpec {
    pub const NAMES: [&'static str; 3] = ["toy", "sphere", "blocks"];

    pub fn named(name: &str) -> Result<Self> {
        let bounds = Aabb::cube(4.0);
        let primitives = match name {
            "toy" => vec![
                Primitive::Sphere {
                    name: "red_sphere".into(),
                    center: [-0.8, 0.0, 0.3],
                    radius: 2.0,
                    albedo: [0.9, 0.2, 0.15],
                },
                Primitive::Box {
                    name: "green_box".into(),
                    center: [1.6, -0.6, -0.8],
                    half_size: [1.0, 1.4, 1.0],
                    albedo: [0.2, 0.8, 0.3],
                },
                Primitive::Sphere {
                    name: "blue_sphere".into(),
                    center: [0.6, 1.6, 1.4],
                    radius: 0.9,
                    albedo: [0.2, 0.3, 0.9],
                },
            ],
            "sphere" => vec![Primitive::Sphere {
                name: "sphere".into(),
                center: [0.0; 3],
                radius: 2.5,
                albedo: [0.8, 0.6, 0.3],
            }],
            "blocks" => vec![
                Primitive::Box {
                    name: "base".into(),
                    center: [0.0, -1.5, 0.0],
                    half_size: [2.5, 0.8, 2.0],
                    albedo: [0.7, 0.7, 0.2],
                },
                Primitive::Box {
                    name: "tower".into(),
                    center: [-1.0, 0.8, 0.5],
                    half_size: [0.8, 1.5, 0.8],
                    albedo: [0.2, 0.4, 0.8],
                },
                Primitive::Sphere {
                    name: "ball".into(),
                    center: [1.3, 0.2, -0.6],
                    radius: 1.0,
                    albedo: [0.85, 0.3, 0.5],
                },
            ],
            other => {
                return Err(Error::invalid(format!(
                    "unknown scene `{other}` (expected one of: {})",
                    Self::NAMES.join(", ")
                )))
            }
        };
        let scene = Self {
            name: name.into(),
            primitives,
            bounds,
            background: [0.0; 3],
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.primitives {
            let (lo, hi) = p.extent();
            if (0..3).any(|a| lo[a] < self.bounds.min[a] || hi[a] > self.bounds.max[a]) {
                return Err(Error::invalid("primitive extends past the scene bounds"));
            }
            if p.albedo().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid("albedo must lie in [0, 1]"));
            }
        }
        if self.background.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("background must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Nearest hit along `ray`: distance and albedo.
    pub fn trace(&self, ray: &Ray) -> Option<(f64, [f64; 3])> {
        self.primitives
            .iter()
            .filter_map(|p| p.intersect(ray).map(|t| (t, p.albedo())))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }
}

/// The exact scene as an occupancy field: occupancy 1 inside a primitive, 0
/// outside.
impl SampleSource for SceneSpec {
    fn sample(&self, position: &Vector3<f64>) -> FieldSample {
        match self.primitives.iter().find(|p| p.contains(position)) {
            Some(p) => FieldSample {
                position: *position,
                density_mean: 1.0,
                density_spread: SIGMA_FLOOR,
                color_mean: p.albedo(),
                color_spread: [SIGMA_FLOOR; 3],
            },
            None => FieldSample::vacuum(*position),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RigKind {
    /// Training views bunched in a narrow arc, test views on the far side.
    OrbitUnobserved,
    /// Frontal cone of cameras with a random split.
    ForwardObserved,
    /// 36 orbit poses 10 degrees apart.
    OrbitDepth,
}

impl std::str::FromStr for RigKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orbit_unobserved" => Ok(RigKind::OrbitUnobserved),
            "forward_observed" => Ok(RigKind::ForwardObserved),
            "orbit_depth" => Ok(RigKind::OrbitDepth),
            other => Err(Error::invalid(format!(
                "unknown rig `{other}` (expected orbit_unobserved, forward_observed or orbit_depth)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Test views lie outside the training arc.
    #[default]
    Unobserved,
    /// Test views are interleaved with training views.
    Observed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    pub kind: RigKind,
    #[serde(default)]
    pub split: Split,
    pub train_count: usize,
    /// Overrides the rig's default number of test views.
    #[serde(default)]
    pub test_count: Option<usize>,
    pub radius: f64,
    pub elevation_deg: f64,
    pub width: u32,
    pub height: u32,
    pub fov_deg: f64,
    pub near: f64,
    pub far: f64,
    pub seed: u64,
}

impl RigSpec {
    pub fn new(kind: RigKind, train_count: usize) -> Self {
        Self {
            kind,
            split: Split::Unobserved,
            train_count,
            test_count: None,
            radius: 10.0,
            elevation_deg: 25.0,
            width: 64,
            height: 64,
            fov_deg: 45.0,
            near: 3.0,
            far: 17.0,
            seed: 0,
        }
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.fov_deg.to_radians()).tan()
    }

    fn camera_at(&self, azimuth_deg: f64, elevation_deg: f64) -> RigPose {
        let (a, e) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let eye = self.radius * Vector3::new(e.cos() * a.sin(), e.sin(), e.cos() * a.cos());
        RigPose {
            camera: Camera::look_at(
                eye,
                Vector3::zeros(),
                Vector3::y(),
                self.width,
                self.height,
                self.focal(),
                self.near,
                self.far,
            ),
            azimuth_deg,
            elevation_deg,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RigPose {
    pub camera: Camera,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rig {
    pub train: Vec<RigPose>,
    pub test: Vec<RigPose>,
}

/// Smallest absolute angle between two azimuths, in degrees.
pub fn azimuth_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

const ORBIT_STEP_DEG: f64 = 10.0;
const ORBIT_POSES: usize = 36;
const ORBIT_DEPTH_TEST: usize = 18;
const ORBIT_RGB_TEST: usize = 8;
const FORWARD_TEST: usize = 4;
const FORWARD_POOL_AZ: [f64; 6] = [-25.0, -15.0, -5.0, 5.0, 15.0, 25.0];
const FORWARD_POOL_EL: [f64; 4] = [0.0, 10.0, 20.0, 30.0];

fn evenly_pick<T: Clone>(items: &[T], count: usize) -> Vec<T> {
    if count >= items.len() {
        return items.to_vec();
    }
    (0..count)
        .map(|k| items[(k * items.len() + items.len() / 2) / count.max(1) % items.len()].clone())
        .collect()
}

pub fn build_rig(spec: &RigSpec) -> Result<Rig> {
    if spec.train_count == 0 {
        return Err(Error::invalid("train_count must be at least 1"));
    }
    let el = spec.elevation_deg;
    let (train, test) = match (spec.kind, spec.split) {
        (RigKind::OrbitUnobserved, _) => {
            if spec.train_count > ORBIT_POSES {
                return Err(Error::invalid(format!(
                    "orbit rig has {ORBIT_POSES} training poses, {} requested",
                    spec.train_count
                )));
            }
            let train_az: Vec<f64> = (0..spec.train_count).map(|k| k as f64 * ORBIT_STEP_DEG).collect();
            // Test poses sit halfway between training slots, so they never coincide.
            let offsets: Vec<f64> = (0..ORBIT_POSES).map(|k| (k as f64 + 0.5) * ORBIT_STEP_DEG).collect();
            let far_side: Vec<f64> = offsets
                .iter()
                .copied()
                .filter(|&a| train_az.iter().all(|&t| azimuth_gap(a, t) > 90.0))
                .collect();
            let pool = if far_side.is_empty() { offsets } else { far_side };
            let test_az = evenly_pick(&pool, spec.test_count.unwrap_or(ORBIT_RGB_TEST));
            (
                train_az.iter().map(|&a| spec.camera_at(a, el)).collect::<Vec<_>>(),
                test_az.iter().map(|&a| spec.camera_at(a, el)).collect::<Vec<_>>(),
            )
        }
        (RigKind::OrbitDepth, Split::Unobserved) => {
            let test_n = spec.test_count.unwrap_or(ORBIT_DEPTH_TEST);
            if spec.train_count + test_n > ORBIT_POSES || spec.train_count > ORBIT_POSES / 2 {
                return Err(Error::invalid(format!(
                    "orbit_depth unobserved split allows at most {} training poses, {} requested",
                    ORBIT_POSES / 2,
                    spec.train_count
                )));
            }
            let train: Vec<RigPose> = (0..spec.train_count)
                .map(|k| spec.camera_at(k as f64 * ORBIT_STEP_DEG, el))
                .collect();
            let far: Vec<f64> = (ORBIT_POSES / 2..ORBIT_POSES).map(|k| k as f64 * ORBIT_STEP_DEG).collect();
            let test = evenly_pick(&far, test_n)
                .into_iter()
                .map(|a| spec.camera_at(a, el))
                .collect();
            (train, test)
        }
        (RigKind::OrbitDepth, Split::Observed) => {
            let test_n = spec
                .test_count
                .unwrap_or(if spec.train_count <= 16 { 3 } else { 6 });
            let total = spec.train_count + test_n;
            if total > ORBIT_POSES || test_n == 0 {
                return Err(Error::invalid(format!(
                    "orbit_depth observed split needs {total} of {ORBIT_POSES} poses"
                )));
            }
            let slots: Vec<usize> = (0..total).map(|k| k * ORBIT_POSES / total).collect();
            let test_slots: Vec<usize> = (0..test_n).map(|j| (2 * j + 1) * total / (2 * test_n)).collect();
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (k, slot) in slots.iter().enumerate() {
                let pose = spec.camera_at(*slot as f64 * ORBIT_STEP_DEG, el);
                if test_slots.contains(&k) {
                    test.push(pose);
                } else {
                    train.push(pose);
                }
            }
            (train, test)
        }
        (RigKind::ForwardObserved, _) => {
            let mut pool: Vec<(f64, f64)> = FORWARD_POOL_EL
                .iter()
                .flat_map(|&e| FORWARD_POOL_AZ.iter().map(move |&a| (a, e)))
                .collect();
            let test_n = spec.test_count.unwrap_or(FORWARD_TEST);
            if spec.train_count + test_n > pool.len() {
                return Err(Error::invalid(format!(
                    "forward rig has {} poses, {} requested",
                    pool.len(),
                    spec.train_count + test_n
                )));
            }
            pool.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
            let make = |&(a, e): &(f64, f64)| spec.camera_at(a, e);
            (
                pool[..spec.train_count].iter().map(make).collect(),
                pool[spec.train_count..spec.train_count + test_n].iter().map(make).collect(),
            )
        }
    };
    if test.is_empty() {
        return Err(Error::invalid("rig produced an empty test split"));
    }
    Ok(Rig { train, test })
}

/// A camera with its RGB or depth pixels (row-major, channels interleaved).
/// Depth 0 marks pixels that see no surface.
#[derive(Clone, Debug, PartialEq)]
pub struct PosedImage {
    pub camera: Camera,
    pub kind: RenderMode,
    pub pixels: Vec<f64>,
}

impl PosedImage {
    pub fn channels(&self) -> usize {
        self.kind.channels()
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        let c = self.channels();
        &self.pixels[index * c..(index + 1) * c]
    }
}

pub fn render_ground_truth(scene: &SceneSpec, camera: &Camera, kind: RenderMode) -> PosedImage {
    let mut pixels = Vec::with_capacity(camera.pixel_count() * kind.channels());
    for y in 0..camera.height {
        for x in 0..camera.width {
            let hit = scene.trace(&camera.pixel_ray(x, y));
            match kind {
                RenderMode::Rgb => pixels.extend(hit.map_or(scene.background, |h| h.1)),
                RenderMode::Depth => pixels.push(hit.map_or(0.0, |h| h.0)),
            }
        }
    }
    PosedImage {
        camera: camera.clone(),
        kind,
        pixels,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scene: SceneSpec,
    pub kind: RenderMode,
    pub train: Vec<PosedImage>,
    pub test: Vec<PosedImage>,
}

impl Dataset {
    pub fn generate(scene: &SceneSpec, rig: &RigSpec, kind: RenderMode) -> Result<Self> {
        scene.validate()?;
        let r = build_rig(rig)?;
        let render = |p: &RigPose| render_ground_truth(scene, &p.camera, kind);
        Ok(Self {
            scene: scene.clone(),
            kind,
            train: r.train.iter().map(render).collect(),
            test: r.test.iter().map(render).collect(),
        })
    }

    pub fn train_pixels(&self) -> usize {
        self.train.iter().map(|i| i.camera.pixel_count()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    pub file_path: String,
    /// World-from-camera transform, row-major.
    pub transform: [[f64; 4]; 4],
}

impl PoseFrame {
    /// Frames under `test/` (optionally written `./test/`) form the test split.
    pub fn is_test(&self) -> bool {
        self.file_path.trim_start_matches("./").starts_with("test")
    }
}

/// `poses.json`. `width`, `height`, `focal` and `frames` are required; the
/// rest default so pose files from other tools load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    #[serde(default)]
    pub cx: Option<f64>,
    #[serde(default)]
    pub cy: Option<f64>,
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
    #[serde(default = "default_kind")]
    pub kind: RenderMode,
    #[serde(default = "default_depth_scale")]
    pub depth_scale: f64,
    pub frames: Vec<PoseFrame>,
}

fn default_near() -> f64 {
    2.0
}
fn default_far() -> f64 {
    6.0
}
fn default_kind() -> RenderMode {
    RenderMode::Rgb
}
fn default_depth_scale() -> f64 {
    DEFAULT_DEPTH_SCALE
}

pub fn camera_to_transform(camera: &Camera) -> [[f64; 4]; 4] {
    let r = &camera.rotation;
    let c = &camera.center;
    [
        [r[(0, 0)], r[(0, 1)], r[(0, 2)], c.x],
        [r[(1, 0)], r[(1, 1)], r[(1, 2)], c.y],
        [r[(2, 0)], r[(2, 1)], r[(2, 2)], c.z],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

impl PoseFile {
    pub fn camera(&self, transform: &[[f64; 4]; 4]) -> Camera {
        let rotation = Matrix3::from_fn(|i, j| transform[i][j]);
        Camera {
            focal: self.focal,
            cx: self.cx.unwrap_or(self.width as f64 / 2.0),
            cy: self.cy.unwrap_or(self.height as f64 / 2.0),
            width: self.width,
            height: self.height,
            rotation,
            center: Vector3::new(transform[0][3], transform[1][3], transform[2][3]),
            near: self.near,
            far: self.far,
        }
    }

    /// Parses `text`, naming the offending key on failure.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| json_error(path, e))
    }
}

fn json_error(path: &Path, e: serde_json::Error) -> Error {
    let message = e.to_string();
    let field = message
        .split('`')
        .nth(1)
        .unwrap_or("<document>")
        .to_string();
    Error::Parse {
        path: path.to_path_buf(),
        field,
        message,
    }
}

pub fn write_raw_f32(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_raw_f32(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            field: "<raw>".into(),
            message: format!("length {} is not a multiple of 4", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn write_rgb_png(path: &Path, width: u32, height: u32, values: &[f64]) -> Result<()> {
    let data: Vec<u8> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(width, height, data)
        .ok_or_else(|| Error::ShapeMismatch("RGB buffer does not match image size".into()))?;
    img.save(path)?;
    Ok(())
}

/// Single-channel 16-bit PNG of `value / scale`, saturated to the u16 range.
pub fn write_gray16_png(path: &Path, width: u32, height: u32, values: &[f64], scale: f64) -> Result<()> {
    let data: Vec<u16> = values
        .iter()
        .map(|v| (v / scale).round().clamp(0.0, u16::MAX as f64) as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(width, height, data)
        .ok_or_else(|| Error::ShapeMismatch("depth buffer does not match image size".into()))?;
    img.save(path)?;
    Ok(())
}

pub fn read_png(path: &Path, kind: RenderMode, depth_scale: f64) -> Result<Vec<f64>> {
    let img = image::open(path)?;
    Ok(match kind {
        RenderMode::Rgb => img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        RenderMode::Depth => img
            .to_luma16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 * depth_scale)
            .collect(),
    })
}

/// Writes a PNG preview plus the exact raw sidecar for one image.
pub fn write_image_pair(stem: &Path, width: u32, height: u32, kind: RenderMode, values: &[f64], depth_scale: f64) -> Result<()> {
    match kind {
        RenderMode::Rgb => write_rgb_png(&stem.with_extension("png"), width, height, values)?,
        RenderMode::Depth => write_gray16_png(&stem.with_extension("png"), width, height, values, depth_scale)?,
    }
    write_raw_f32(&stem.with_extension("f32"), values)
}

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    let first = dataset
        .train
        .first()
        .ok_or_else(|| Error::invalid("dataset has no training images"))?;
    fs::create_dir_all(dir.join("train"))?;
    fs::create_dir_all(dir.join("test"))?;
    fs::write(dir.join("scene.json"), serde_json::to_string_pretty(&dataset.scene)?)?;
    let cam = &first.camera;
    let mut frames = Vec::new();
    for (split, images) in [("train", &dataset.train), ("test", &dataset.test)] {
        for (k, img) in images.iter().enumerate() {
            let file_path = format!("{split}/{k:03}");
            write_image_pair(
                &dir.join(&file_path),
                img.camera.width,
                img.camera.height,
                img.kind,
                &img.pixels,
                DEFAULT_DEPTH_SCALE,
            )?;
            frames.push(PoseFrame {
                file_path,
                transform: camera_to_transform(&img.camera),
            });
        }
    }
    let poses = PoseFile {
        width: cam.width,
        height: cam.height,
        focal: cam.focal,
        cx: Some(cam.cx),
        cy: Some(cam.cy),
        near: cam.near,
        far: cam.far,
        kind: dataset.kind,
        depth_scale: DEFAULT_DEPTH_SCALE,
        frames,
    };
    fs::write(dir.join("poses.json"), serde_json::to_string_pretty(&poses)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let scene_path = dir.join("scene.json");
    let scene: SceneSpec = serde_json::from_str(&fs::read_to_string(&scene_path)?)
        .map_err(|e| json_error(&scene_path, e))?;
    let poses_path = dir.join("poses.json");
    let poses = PoseFile::parse(&fs::read_to_string(&poses_path)?, &poses_path)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for frame in &poses.frames {
        let camera = poses.camera(&frame.transform);
        camera.validate().map_err(|e| Error::Parse {
            path: poses_path.clone(),
            field: "transform".into(),
            message: format!("{}: {e}", frame.file_path),
        })?;
        let stem: PathBuf = dir.join(&frame.file_path);
        let raw = stem.with_extension("f32");
        let pixels = if raw.exists() {
            read_raw_f32(&raw)?
        } else {
            read_png(&stem.with_extension("png"), poses.kind, poses.depth_scale)?
        };
        if pixels.len() != camera.pixel_count() * poses.kind.channels() {
            return Err(Error::Parse {
                path: stem,
                field: "pixels".into(),
                message: format!("expected {} values, found {}", camera.pixel_count() * poses.kind.channels(), pixels.len()),
            });
        }
        let img = PosedImage {
            camera,
            kind: poses.kind,
            pixels,
        };
        if frame.is_test() {
            test.push(img);
        } else {
            train.push(img);
        }
    }
    Ok(Dataset {
        scene,
        kind: poses.kind,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn center_pixel_hits_unit_sphere_at_two() {
        let scene = SceneSpec {
            name: "unit".into(),
            primitives: vec![Primitive::Sphere {
                name: "s".into(),
                center: [0.0; 3],
                radius: 1.0,
                albedo: [1.0; 3],
            }],
            bounds: Aabb::cube(2.0),
            background: [0.0; 3],
        };
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.0, -3.0),
            Vector3::zeros(),
            Vector3::y(),
            33,
            33,
            30.0,
            0.5,
            6.0,
        );
        let img = render_ground_truth(&scene, &cam, RenderMode::Depth);
        assert_abs_diff_eq!(img.pixel(16 * 33 + 16)[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_scene_is_background() {
        let scene = SceneSpec {
            name: "empty".into(),
            primitives: vec![],
            bounds: Aabb::cube(1.0),
            background: [0.2, 0.4, 0.6],
        };
        let spec = RigSpec::new(RigKind::OrbitUnobserved, 2);
        let rig = build_rig(&spec).unwrap();
        let img = render_ground_truth(&scene, &rig.train[0].camera, RenderMode::Rgb);
        assert!(img.pixels.chunks(3).all(|p| p == [0.2, 0.4, 0.6]));
        let depth = render_ground_truth(&scene, &rig.train[0].camera, RenderMode::Depth);
        assert!(depth.pixels.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn box_intersection() {
        let b = Primitive::Box {
            name: "b".into(),
            center: [0.0; 3],
            half_size: [1.0, 2.0, 3.0],
            albedo: [0.5; 3],
        };
        let ray = Ray {
            origin: Vector3::new(-5.0, 0.5, 0.5),
            direction: Vector3::x(),
        };
        assert_abs_diff_eq!(b.intersect(&ray).unwrap(), 4.0, epsilon = 1e-12);
        let miss = Ray {
            origin: Vector3::new(-5.0, 2.5, 0.0),
            direction: Vector3::x(),
        };
        assert!(b.intersect(&miss).is_none());
    }

    #[test]
    fn named_scenes_validate() {
        for n in SceneSpec::NAMES {
            SceneSpec::named(n).unwrap();
        }
        assert!(SceneSpec::named("chair").is_err());
    }

    #[test]
    fn orbit_unobserved_two_views() {
        let rig = build_rig(&RigSpec::new(RigKind::OrbitUnobserved, 2)).unwrap();
        assert_eq!(rig.train.len(), 2);
        assert!(azimuth_gap(rig.train[0].azimuth_deg, rig.train[1].azimuth_deg) <= 20.0);
        for t in &rig.test {
            for tr in &rig.train {
                assert!(azimuth_gap(t.azimuth_deg, tr.azimuth_deg) > 90.0);
            }
        }
    }

    #[test]
    fn orbit_depth_splits() {
        let rig = build_rig(&RigSpec::new(RigKind::OrbitDepth, 8)).unwrap();
        assert_eq!((rig.train.len(), rig.test.len()), (8, 18));
        let rig = build_rig(&RigSpec::new(RigKind::OrbitDepth, 16)).unwrap();
        assert_eq!((rig.train.len(), rig.test.len()), (16, 18));
        assert!(matches!(
            build_rig(&RigSpec::new(RigKind::OrbitDepth, 36)),
            Err(Error::InvalidArgument(_))
        ));
        assert!(build_rig(&RigSpec::new(RigKind::OrbitDepth, 0)).is_err());

        for (train, test) in [(8, 3), (16, 3), (30, 6)] {
            let mut spec = RigSpec::new(RigKind::OrbitDepth, train);
            spec.split = Split::Observed;
            let rig = build_rig(&spec).unwrap();
            assert_eq!((rig.train.len(), rig.test.len()), (train, test));
        }
    }

    #[test]
    fn full_orbit_uses_interleaved_test_views() {
        let rig = build_rig(&RigSpec::new(RigKind::OrbitUnobserved, 36)).unwrap();
        assert_eq!(rig.train.len(), 36);
        assert!(!rig.test.is_empty());
    }

    #[test]
    fn forward_rig_is_seeded() {
        let mut spec = RigSpec::new(RigKind::ForwardObserved, 8);
        spec.seed = 3;
        let a = build_rig(&spec).unwrap();
        let b = build_rig(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.test.len()), (8, 4));
        spec.train_count = 23;
        assert!(build_rig(&spec).is_err());
    }

    #[test]
    fn missing_key_is_named() {
        let text = r#"{"width": 4, "height": 4, "frames": []}"#;
        let err = PoseFile::parse(text, Path::new("poses.json")).unwrap_err();
        match err {
            Error::Parse { field, .. } => assert_eq!(field, "focal"),
            other => panic!("unexpected {other}"),
        }
    }
}
