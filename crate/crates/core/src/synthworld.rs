//! Procedural scenes of spheres and boxes and an analytic RGBD + feature renderer.
//!
//! Feature maps are pixel-aligned: every pixel that hits an object carries the
//! label embedding of that object, background pixels carry zeros.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Aabb, CameraIntrinsics, CameraPose, GeometryError, Ray, Vec3};

/// Object categories drawn by [`make_scene`]. Single words, so they can be
/// matched as tokens in generated text.
pub const LABEL_CATALOG: &[&str] = &[
    "chair", "table", "sofa", "bed", "lamp", "cabinet", "plant", "tv", "bookshelf", "desk", "piano", "refrigerator",
];

const HIT_EPS: f64 = 1e-9;
const MAX_COSINE: f64 = 0.9;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("could not place {requested} objects without overlap after {attempts} attempts")]
    PlacementFailed { requested: usize, attempts: usize },
    #[error("room bounds are degenerate")]
    DegenerateBounds,
    #[error("room too small for objects of the minimum size")]
    RoomTooSmall,
    #[error("label embedding needs at least one dimension and one label")]
    EmptyEmbedding,
    #[error("could not draw {0} label vectors with pairwise cosine below {MAX_COSINE}")]
    EmbeddingCollision(usize),
    #[error("invalid scene object: {0}")]
    InvalidObject(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: Vec3 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ObjectRepr", into = "ObjectRepr")]
pub struct SceneObject {
    pub shape: Shape,
    pub center: Vec3,
    pub label: String,
    pub aabb: Aabb,
}

impl SceneObject {
    pub fn sphere(center: Vec3, radius: f64, label: &str) -> Result<Self, SynthError> {
        Self::new(Shape::Sphere { radius }, center, label)
    }

    pub fn cuboid(center: Vec3, half_extents: Vec3, label: &str) -> Result<Self, SynthError> {
        Self::new(Shape::Box { half_extents }, center, label)
    }

    pub fn new(shape: Shape, center: Vec3, label: &str) -> Result<Self, SynthError> {
        if label.trim().is_empty() {
            return Err(SynthError::InvalidObject("empty label".into()));
        }
        let half = match shape {
            Shape::Sphere { radius } if radius > 0.0 => Vec3::repeat(radius),
            Shape::Box { half_extents } if half_extents.iter().all(|h| *h > 0.0) => half_extents,
            _ => return Err(SynthError::InvalidObject("sizes must be positive".into())),
        };
        let aabb = Aabb::from_center_half_extents(center, half)?;
        Ok(Self { shape, center, label: label.to_string(), aabb })
    }

    /// Nearest positive ray parameter and outward surface normal.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, Vec3)> {
        match self.shape {
            Shape::Sphere { radius } => {
                let oc = ray.origin - self.center;
                let b = oc.dot(&ray.direction);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > HIT_EPS { -b - sq } else { -b + sq };
                if t <= HIT_EPS {
                    return None;
                }
                let n = (ray.at(t) - self.center) / radius;
                Some((t, n))
            }
            Shape::Box { .. } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis0 = 0;
                let mut axis1 = 0;
                for a in 0..3 {
                    let d = ray.direction[a];
                    let o = ray.origin[a];
                    if d.abs() < 1e-300 {
                        if o < self.aabb.min[a] || o > self.aabb.max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut near, mut far) = ((self.aabb.min[a] - o) / d, (self.aabb.max[a] - o) / d);
                    if near > far {
                        std::mem::swap(&mut near, &mut far);
                    }
                    if near > t0 {
                        t0 = near;
                        axis0 = a;
                    }
                    if far < t1 {
                        t1 = far;
                        axis1 = a;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                let (t, axis, entering) = if t0 > HIT_EPS {
                    (t0, axis0, true)
                } else if t1 > HIT_EPS {
                    (t1, axis1, false)
                } else {
                    return None;
                };
                let mut n = Vec3::zeros();
                let s = -ray.direction[axis].signum();
                n[axis] = if entering { s } else { -s };
                Some((t, n))
            }
        }
    }

    /// Unsigned distance from `p` to the object's surface.
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        match self.shape {
            Shape::Sphere { radius } => ((p - self.center).norm() - radius).abs(),
            Shape::Box { half_extents } => {
                let q = (p - self.center).abs() - half_extents;
                let outside = q.map(|x| x.max(0.0)).norm();
                let inside = q.max().min(0.0);
                (outside + inside).abs()
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectRepr {
    shape: String,
    center: [f64; 3],
    size: Vec<f64>,
    label: String,
    aabb: Aabb,
}

impl TryFrom<ObjectRepr> for SceneObject {
    type Error = SynthError;
    fn try_from(r: ObjectRepr) -> Result<Self, Self::Error> {
        let shape = match (r.shape.as_str(), r.size.as_slice()) {
            ("sphere", [radius]) => Shape::Sphere { radius: *radius },
            ("box", [x, y, z]) => Shape::Box { half_extents: Vec3::new(*x, *y, *z) },
            (s, size) => return Err(SynthError::InvalidObject(format!("shape {s:?} with {} size values", size.len()))),
        };
        let mut obj = SceneObject::new(shape, Vec3::from(r.center), &r.label)?;
        let drift = (obj.aabb.min - r.aabb.min).abs().max().max((obj.aabb.max - r.aabb.max).abs().max());
        if drift > 1e-9 {
            return Err(SynthError::InvalidObject(format!("aabb of {:?} does not enclose its shape", r.label)));
        }
        obj.aabb = r.aabb;
        Ok(obj)
    }
}

impl From<SceneObject> for ObjectRepr {
    fn from(o: SceneObject) -> Self {
        let (shape, size) = match o.shape {
            Shape::Sphere { radius } => ("sphere", vec![radius]),
            Shape::Box { half_extents } => ("box", half_extents.iter().copied().collect()),
        };
        ObjectRepr { shape: shape.into(), center: o.center.into(), size, label: o.label, aabb: o.aabb }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub bounds: Aabb,
    pub seed: u64,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn labels(&self) -> Vec<&str> {
        self.objects.iter().map(|o| o.label.as_str()).collect()
    }

    /// Nearest hit along a ray: `(t, normal, object index)`.
    pub fn raycast(&self, ray: &Ray) -> Option<(f64, Vec3, usize)> {
        self.objects
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.intersect(ray).map(|(t, n)| (t, n, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        self.objects.iter().map(|o| o.surface_distance(p)).fold(f64::INFINITY, f64::min)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }
}

/// Deterministic rejection-sampled scene. Labels come from [`LABEL_CATALOG`].
pub fn make_scene(seed: u64, n_objects: usize, bounds: Aabb) -> Result<Scene, SynthError> {
    if bounds.is_degenerate() {
        return Err(SynthError::DegenerateBounds);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = bounds.extent();
    let scale = ext.min();
    let (size_lo, size_hi) = (0.06 * scale, 0.16 * scale);
    if 2.0 * size_hi >= scale {
        return Err(SynthError::RoomTooSmall);
    }
    let budget = 10 * n_objects * 100;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects);
    let mut attempts = 0;
    while objects.len() < n_objects {
        if attempts >= budget {
            return Err(SynthError::PlacementFailed { requested: n_objects, attempts });
        }
        attempts += 1;
        let label = *LABEL_CATALOG.choose(&mut rng).expect("catalog non-empty");
        let shape = if rng.random_bool(0.5) {
            Shape::Sphere { radius: rng.random_range(size_lo..size_hi) }
        } else {
            Shape::Box {
                half_extents: Vec3::new(
                    rng.random_range(size_lo..size_hi),
                    rng.random_range(size_lo..size_hi),
                    rng.random_range(size_lo..size_hi),
                ),
            }
        };
        let half = match shape {
            Shape::Sphere { radius } => Vec3::repeat(radius),
            Shape::Box { half_extents } => half_extents,
        };
        let center = Vec3::from_fn(|i, _| rng.random_range((bounds.min[i] + half[i])..(bounds.max[i] - half[i])));
        let obj = SceneObject::new(shape, center, label)?;
        if !bounds.contains_box(&obj.aabb) {
            continue;
        }
        if objects.iter().any(|o| o.aabb.intersection_volume(&obj.aabb) > 0.0) {
            continue;
        }
        objects.push(obj);
    }
    Ok(Scene { bounds, seed, objects })
}

/// Fixed unit-norm vector per label; stands in for language-aligned 2D features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEmbedding {
    pub labels: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    pub seed: u64,
}

impl LabelEmbedding {
    pub fn generate<S: AsRef<str>>(labels: &[S], dim: usize, seed: u64) -> Result<Self, SynthError> {
        if dim == 0 || labels.is_empty() {
            return Err(SynthError::EmptyEmbedding);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(labels.len());
        for _ in labels {
            let mut tries = 0;
            loop {
                tries += 1;
                if tries > 10_000 {
                    return Err(SynthError::EmbeddingCollision(labels.len()));
                }
                let raw: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm < 1e-6 {
                    continue;
                }
                let v: Vec<f64> = raw.iter().map(|x| x / norm).collect();
                if vectors.iter().all(|w| cosine(w, &v) < MAX_COSINE) {
                    vectors.push(v);
                    break;
                }
            }
        }
        Ok(Self { labels: labels.iter().map(|l| l.as_ref().to_string()).collect(), vectors, seed })
    }

    /// Embedding over the full [`LABEL_CATALOG`].
    pub fn catalog(dim: usize, seed: u64) -> Result<Self, SynthError> {
        Self::generate(LABEL_CATALOG, dim, seed)
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn id_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn name_of(&self, id: i32) -> Option<&str> {
        usize::try_from(id).ok().and_then(|i| self.labels.get(i)).map(String::as_str)
    }

    pub fn vector(&self, id: usize) -> &[f64] {
        &self.vectors[id]
    }
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// One rendered view. Images are row-major, `index = row * width + col`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub width: usize,
    pub height: usize,
    pub feature_dim: usize,
    /// `H*W*3`, in `[0, 1]`.
    pub rgb: Vec<f64>,
    /// Camera-frame z; 0 where the ray misses.
    pub depth: Vec<f64>,
    /// `H*W*D`.
    pub features: Vec<f64>,
    /// Label id per pixel, -1 for background.
    pub semantics: Vec<i32>,
    pub intr: CameraIntrinsics,
    pub pose: CameraPose,
}

impl CameraView {
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn feature_at(&self, idx: usize) -> &[f64] {
        &self.features[idx * self.feature_dim..(idx + 1) * self.feature_dim]
    }

    pub fn rgb_at(&self, idx: usize) -> [f64; 3] {
        [self.rgb[3 * idx], self.rgb[3 * idx + 1], self.rgb[3 * idx + 2]]
    }

    pub fn hit_count(&self) -> usize {
        self.depth.iter().filter(|d| **d > 0.0).count()
    }

    pub fn visible_labels(&self) -> Vec<i32> {
        let mut ids: Vec<i32> = self.semantics.iter().copied().filter(|s| *s >= 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Direction towards the light, world frame (y up).
const LIGHT_DIR: [f64; 3] = [0.4, 1.0, 0.3];
const AMBIENT: f64 = 0.25;

/// Deterministic base color for a label id.
pub fn label_color(id: usize) -> [f64; 3] {
    // Golden-ratio hue walk, converted with a cheap HSV->RGB at full saturation/value 0.9.
    let h = (id as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.1 + 0.8 * r, 0.1 + 0.8 * g, 0.1 + 0.8 * b]
}

/// Raycast every pixel center. Objects whose label is missing from `embed`
/// render as background.
pub fn render(scene: &Scene, intr: &CameraIntrinsics, pose: &CameraPose, embed: &LabelEmbedding) -> CameraView {
    let (w, h, d) = (intr.width as usize, intr.height as usize, embed.dim());
    let mut view = CameraView {
        width: w,
        height: h,
        feature_dim: d,
        rgb: vec![0.0; w * h * 3],
        depth: vec![0.0; w * h],
        features: vec![0.0; w * h * d],
        semantics: vec![-1; w * h],
        intr: *intr,
        pose: *pose,
    };
    let light = Vec3::from(LIGHT_DIR).normalize();
    let ids: Vec<Option<usize>> = scene.objects.iter().map(|o| embed.id_of(&o.label)).collect();
    for row in 0..h {
        for col in 0..w {
            let (u, v) = CameraIntrinsics::pixel_center(col as u32, row as u32);
            let ray = Ray::through_pixel(u, v, intr, pose);
            let Some((t, normal, obj)) = scene.raycast(&ray) else { continue };
            let Some(id) = ids[obj] else { continue };
            let idx = row * w + col;
            let hit = ray.at(t);
            view.depth[idx] = pose.to_camera(&hit).z;
            view.semantics[idx] = id as i32;
            view.features[idx * d..(idx + 1) * d].copy_from_slice(embed.vector(id));
            let shade = AMBIENT + (1.0 - AMBIENT) * normal.dot(&light).max(0.0);
            let base = label_color(id);
            for c in 0..3 {
                view.rgb[3 * idx + c] = base[c] * shade;
            }
        }
    }
    view
}

/// Default orbit camera: 128x128, 60 degree horizontal field of view.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::from_fov(128, 128, 60f64.to_radians()).expect("valid default intrinsics")
}

/// Cameras evenly spaced on a horizontal circle around the bounds center.
pub fn orbit_cameras(scene: &Scene, n_views: usize, radius: f64) -> Vec<(CameraIntrinsics, CameraPose)> {
    orbit_cameras_with(scene, n_views, radius, default_intrinsics())
}

pub fn orbit_cameras_with(
    scene: &Scene,
    n_views: usize,
    radius: f64,
    intr: CameraIntrinsics,
) -> Vec<(CameraIntrinsics, CameraPose)> {
    let center = scene.bounds.center();
    let up = Vec3::new(0.0, 1.0, 0.0);
    (0..n_views)
        .map(|i| {
            let theta = std::f64::consts::TAU * i as f64 / n_views as f64;
            let eye = center + Vec3::new(radius * theta.cos(), 0.0, radius * theta.sin());
            let pose = CameraPose::look_at(eye, center, up).expect("orbit eye differs from center");
            (intr, pose)
        })
        .collect()
}

/// Render all orbit views of a scene.
pub fn render_orbit(scene: &Scene, n_views: usize, radius: f64, intr: CameraIntrinsics, embed: &LabelEmbedding) -> Vec<CameraView> {
    orbit_cameras_with(scene, n_views, radius, intr)
        .iter()
        .map(|(k, p)| render(scene, k, p, embed))
        .collect()
}
