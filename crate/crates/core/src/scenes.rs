//! Procedural scenes of labeled primitives, ring-camera episodes and the
//! dataset container.
//!
//! Dataset layout (little-endian):
//!
//! ```text
//! b"QGFSDS" | u32 version | u32 width | u32 height | u32 episodes | u32 crc32 of the body
//! body:
//!   u32 views per episode | f64 fx, fy, cx, cy | u64 seed | u64 semantic seed
//!   u8 feature targets present | u32 autoencoder checksum
//!   per episode:
//!     u64 scene seed | u32 json length | JSON label tables
//!     per view: f64 × 12 pose | u8 RGB H×W×3 | f32 depth H×W | u8 labels H×W
//!               [f32 feature H×W×3 when present]
//! ```
//!
//! Pixel labels are `2·instance + part`, or 255 for background.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Camera, GeomError, Quaternion};
use crate::hse::{self, Autoencoder, HseError, PixelLabel, SyntheticProvider};
use crate::par;
use crate::qgfs::RgbdImage;
use crate::raster::{self, Gaussian, GaussianCloud, RasterConfig};

const MAGIC: &[u8; 6] = b"QGFSDS";
const VERSION: u32 = 1;
pub const BACKGROUND: u8 = 255;
pub const NUM_CLASSES: u32 = 8;
pub const PARTS_PER_OBJECT: u32 = 2;
pub const WORKSPACE_HALF: f64 = 0.5;
pub const GT_OPACITY: f64 = 0.95;
/// Pixels whose accumulated alpha is below this get no depth and no label.
pub const DEPTH_MIN_ALPHA: f64 = 0.5;
/// Each triple is (input, input, target).
pub const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [3, 4, 5], [6, 7, 8], [9, 10, 11]];

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("dataset: {0}")]
    Format(String),
    #[error("dataset checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Hse(#[from] HseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Box { half: [f64; 3] },
    Sphere { radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub instance: u32,
    pub class: u32,
    pub shape: Shape,
    pub center: [f64; 3],
    pub yaw: f64,
    pub body_color: [f64; 3],
    pub handle_color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub objects: Vec<ObjectSpec>,
}

/// Ground-truth cloud with one label per primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCloud {
    pub cloud: GaussianCloud,
    pub labels: Vec<PixelLabel>,
}

const PALETTE: [[f64; 3]; NUM_CLASSES as usize] = [
    [0.85, 0.20, 0.18],
    [0.20, 0.55, 0.85],
    [0.25, 0.75, 0.30],
    [0.90, 0.75, 0.20],
    [0.65, 0.30, 0.75],
    [0.95, 0.50, 0.15],
    [0.20, 0.75, 0.75],
    [0.80, 0.80, 0.80],
];

fn shape_extent(s: &Shape) -> f64 {
    match s {
        Shape::Box { half } => (half[0] * half[0] + half[1] * half[1] + half[2] * half[2]).sqrt(),
        Shape::Sphere { radius } => *radius,
    }
}

fn random_object(rng: &mut ChaCha8Rng, instance: u32) -> ObjectSpec {
    let class = rng.gen_range(0..NUM_CLASSES);
    let shape = if class < NUM_CLASSES / 2 {
        Shape::Box { half: [rng.gen_range(0.08..0.18), rng.gen_range(0.08..0.18), rng.gen_range(0.08..0.18)] }
    } else {
        Shape::Sphere { radius: rng.gen_range(0.1..0.18) }
    };
    let body = PALETTE[class as usize];
    let room = WORKSPACE_HALF - shape_extent(&shape);
    ObjectSpec {
        instance,
        class,
        shape,
        center: [rng.gen_range(-room..room), rng.gen_range(-room..room), rng.gen_range(-room..room).clamp(-0.15, 0.15)],
        yaw: rng.gen_range(0.0..std::f64::consts::TAU),
        body_color: body,
        handle_color: body.map(|c| 0.45 * c + 0.05),
    }
}

/// Rotation taking +z to `n`.
fn align_z(n: &Vector3<f64>) -> Quaternion {
    if n.z < -1.0 + 1e-9 {
        return Quaternion::new(0.0, 1.0, 0.0, 0.0);
    }
    Quaternion::new(1.0 + n.z, -n.y, n.x, 0.0).normalized().expect("nonzero for n != -z")
}

/// Surface sample in object coordinates: (point, outward normal).
fn sample_surface(rng: &mut ChaCha8Rng, shape: &Shape) -> (Vector3<f64>, Vector3<f64>) {
    match *shape {
        Shape::Sphere { radius } => {
            let d = loop {
                let v =
                    Vector3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng));
                if v.norm() > 1e-9 {
                    break v.normalize();
                }
            };
            (d * radius, d)
        }
        Shape::Box { half } => {
            let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
            let total: f64 = areas.iter().sum::<f64>() * 2.0;
            let mut pick = rng.gen_range(0.0..total);
            let mut face = 0;
            for (i, a) in [areas[0], areas[0], areas[1], areas[1], areas[2], areas[2]].iter().enumerate() {
                if pick < *a {
                    face = i;
                    break;
                }
                pick -= a;
                face = i;
            }
            let axis = face / 2;
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            let mut p = Vector3::new(
                rng.gen_range(-half[0]..half[0]),
                rng.gen_range(-half[1]..half[1]),
                rng.gen_range(-half[2]..half[2]),
            );
            p[axis] = sign * half[axis];
            let mut n = Vector3::zeros();
            n[axis] = sign;
            (p, n)
        }
    }
}

fn surface_area(shape: &Shape) -> f64 {
    match *shape {
        Shape::Sphere { radius } => 4.0 * std::f64::consts::PI * radius * radius,
        Shape::Box { half } => 8.0 * (half[0] * half[1] + half[1] * half[2] + half[0] * half[2]),
    }
}

fn is_handle(shape: &Shape, p: &Vector3<f64>) -> bool {
    match *shape {
        Shape::Box { half } => p.z > 0.4 * half[2],
        Shape::Sphere { radius } => p.z > 0.4 * radius,
    }
}

/// Deterministic scene of 1–4 labeled objects inside the workspace cube.
pub fn generate_scene(seed: u64) -> (SceneSpec, LabeledCloud) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wanted = rng.gen_range(1..=4u32);
    let mut objects: Vec<ObjectSpec> = Vec::new();
    for _ in 0..wanted {
        for _attempt in 0..20 {
            let cand = random_object(&mut rng, objects.len() as u32);
            let c = Vector3::from(cand.center);
            let clear = objects.iter().all(|o| {
                (Vector3::from(o.center) - c).norm() > shape_extent(&o.shape) + shape_extent(&cand.shape) + 0.02
            });
            if clear {
                objects.push(cand);
                break;
            }
        }
    }
    let light = Vector3::new(0.3, 0.2, 1.0).normalize();
    let mut gaussians = Vec::new();
    let mut labels = Vec::new();
    for o in &objects {
        let count = rng.gen_range(50..=200usize);
        let radius = 1.6 * (surface_area(&o.shape) / (std::f64::consts::PI * count as f64)).sqrt();
        let (sy, cy) = o.yaw.sin_cos();
        let rot = nalgebra::Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
        for _ in 0..count {
            let (p, n) = sample_surface(&mut rng, &o.shape);
            let part = u32::from(is_handle(&o.shape, &p));
            let wn = rot * n;
            let shade = 0.55 + 0.45 * wn.dot(&light).max(0.0);
            let base = if part == 1 { o.handle_color } else { o.body_color };
            gaussians.push(Gaussian {
                mean: rot * p + Vector3::from(o.center),
                rotation: align_z(&wn),
                scale: [radius, radius, 0.15 * radius],
                opacity: GT_OPACITY,
                color: base.map(|c| (c * shade).clamp(0.0, 1.0)),
                feature: [0.0; 3],
            });
            labels.push(PixelLabel { instance: o.instance, class: o.class, part });
        }
    }
    (SceneSpec { seed, objects }, LabeledCloud { cloud: GaussianCloud::new(gaussians), labels })
}

/// Ring-camera layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraRig {
    pub resolution: usize,
    pub views: usize,
    pub radius: f64,
    pub elevation_deg: f64,
    pub fov_deg: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self { resolution: 64, views: 12, radius: 1.5, elevation_deg: 30.0, fov_deg: 50.0 }
    }
}

impl CameraRig {
    pub fn intrinsics(&self) -> [f64; 4] {
        let f = self.resolution as f64 / (2.0 * (self.fov_deg.to_radians() / 2.0).tan());
        let c = self.resolution as f64 / 2.0;
        [f, f, c, c]
    }

    /// Cameras ordered by azimuth, all looking at the workspace center.
    pub fn cameras(&self) -> Vec<Camera> {
        let e = self.elevation_deg.to_radians();
        (0..self.views)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / self.views as f64;
                let eye = Vector3::new(
                    self.radius * e.cos() * a.cos(),
                    self.radius * e.cos() * a.sin(),
                    self.radius * e.sin(),
                );
                Camera::look_at(
                    eye,
                    Vector3::zeros(),
                    Vector3::z(),
                    self.intrinsics(),
                    self.resolution,
                    self.resolution,
                )
                .expect("ring cameras are never vertical")
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub pose: [f64; 12],
    pub rgb: Vec<u8>,
    pub depth: Vec<f32>,
    pub labels: Vec<u8>,
    /// Compact semantic targets, H×W×3; `None` while pending.
    pub features: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectLabel {
    pub instance: u32,
    pub class: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LabelTables {
    objects: Vec<ObjectLabel>,
    /// `(instance, part)` per ground-truth primitive.
    gaussians: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub scene_seed: u64,
    pub objects: Vec<ObjectLabel>,
    pub gaussian_labels: Vec<(u32, u32)>,
    pub views: Vec<View>,
}

fn label_code(l: &PixelLabel) -> u8 {
    (l.instance * PARTS_PER_OBJECT + l.part) as u8
}

/// Renders RGB, blended depth and per-pixel labels for every rig camera.
/// Feature targets are left pending.
pub fn render_episode(scene_seed: u64, scene: &LabeledCloud, rig: &CameraRig) -> Episode {
    let cfg = RasterConfig { parallel: false, ..RasterConfig::default() };
    let views = rig
        .cameras()
        .into_iter()
        .map(|cam| {
            let (out, state) = raster::render(&scene.cloud, &cam, &cfg);
            let dom = raster::dominant_contributor(&state, &scene.cloud, DEPTH_MIN_ALPHA);
            View {
                pose: cam.pose_rows(),
                rgb: raster::dump::rgb_bytes(&out.color),
                depth: out.normalized_depth(DEPTH_MIN_ALPHA).iter().map(|d| *d as f32).collect(),
                labels: dom.iter().map(|g| g.map_or(BACKGROUND, |i| label_code(&scene.labels[i]))).collect(),
                features: None,
            }
        })
        .collect();
    let mut objects: Vec<ObjectLabel> =
        scene.labels.iter().map(|l| ObjectLabel { instance: l.instance, class: l.class }).collect();
    objects.dedup();
    Episode { scene_seed, objects, gaussian_labels: scene.labels.iter().map(|l| (l.instance, l.part)).collect(), views }
}

impl Episode {
    pub fn pixel_labels(&self, view: usize) -> Vec<Option<PixelLabel>> {
        self.views[view]
            .labels
            .iter()
            .map(|&c| {
                (c != BACKGROUND).then(|| {
                    let instance = c as u32 / PARTS_PER_OBJECT;
                    let class = self.objects.iter().find(|o| o.instance == instance).map_or(0, |o| o.class);
                    PixelLabel { instance, class, part: c as u32 % PARTS_PER_OBJECT }
                })
            })
            .collect()
    }
}

/// Generation parameters; together with the code they fix every byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub episodes: usize,
    pub rig: CameraRig,
    pub semantic_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { seed: 0, episodes: 64, rig: CameraRig::default(), semantic_seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    pub intrinsics: [f64; 4],
    pub seed: u64,
    pub semantic_seed: u64,
    /// Checksum of the autoencoder that produced the feature targets.
    pub ae_checksum: Option<u32>,
    pub episodes: Vec<Episode>,
}

/// Seed of episode `i` for dataset seed `seed`.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    let mut x = seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn generate_dataset(cfg: &DatasetConfig, parallel: bool) -> Dataset {
    let episodes = par::map_indexed(cfg.episodes, parallel, |i| {
        let s = episode_seed(cfg.seed, i);
        let (_, scene) = generate_scene(s);
        render_episode(s, &scene, &cfg.rig)
    });
    Dataset {
        width: cfg.rig.resolution,
        height: cfg.rig.resolution,
        intrinsics: cfg.rig.intrinsics(),
        seed: cfg.seed,
        semantic_seed: cfg.semantic_seed,
        ae_checksum: None,
        episodes,
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SceneError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| SceneError::Format("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, SceneError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, SceneError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, SceneError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, SceneError> {
        Ok(self.take(n * 4)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }
}

const HEADER_LEN: usize = 6 + 5 * 4;

impl Dataset {
    pub fn views_per_episode(&self) -> usize {
        self.episodes.first().map_or(0, |e| e.views.len())
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn has_features(&self) -> bool {
        !self.episodes.is_empty() && self.episodes.iter().all(|e| e.views.iter().all(|v| v.features.is_some()))
    }

    pub fn camera(&self, episode: usize, view: usize) -> Camera {
        let [fx, fy, cx, cy] = self.intrinsics;
        Camera::identity_pose(fx, fy, cx, cy, self.width, self.height)
            .with_pose_rows(&self.episodes[episode].views[view].pose)
    }

    pub fn rgbd(&self, episode: usize, view: usize) -> RgbdImage {
        let v = &self.episodes[episode].views[view];
        let rgb: Vec<f64> = v.rgb.iter().map(|b| *b as f64 / 255.0).collect();
        let depth: Vec<f64> = v.depth.iter().map(|d| *d as f64).collect();
        RgbdImage::from_parts(self.width, self.height, &rgb, &depth)
    }

    pub fn target_rgb(&self, episode: usize, view: usize) -> Vec<f64> {
        self.episodes[episode].views[view].rgb.iter().map(|b| *b as f64 / 255.0).collect()
    }

    pub fn target_features(&self, episode: usize, view: usize) -> Option<Vec<f64>> {
        self.episodes[episode].views[view].features.as_ref().map(|f| f.iter().map(|v| *v as f64).collect())
    }

    /// Dense 512-d features and masks for one view from the synthetic provider.
    pub fn semantic_view(&self, episode: usize, view: usize) -> Result<(hse::FeatureMap, hse::MaskStack), SceneError> {
        let provider = SyntheticProvider::new(self.semantic_seed);
        Ok(provider.synth_features(self.width, self.height, &self.episodes[episode].pixel_labels(view))?)
    }

    /// Fills every view's compact targets with `ae` and records its checksum.
    pub fn attach_features(&mut self, ae: &Autoencoder, ae_checksum: u32, parallel: bool) -> Result<(), SceneError> {
        let nv = self.views_per_episode();
        let jobs: Vec<(usize, usize)> = (0..self.episodes.len()).flat_map(|e| (0..nv).map(move |v| (e, v))).collect();
        let maps = par::map_indexed(jobs.len(), parallel, |j| -> Result<Vec<f32>, SceneError> {
            let (e, v) = jobs[j];
            let (feat, stack) = self.semantic_view(e, v)?;
            let pooled = hse::pool_stack(&stack, &feat)?;
            let compact = hse::compact_targets(&stack, &pooled, ae)?;
            Ok(compact.data.iter().map(|x| *x as f32).collect())
        });
        for ((e, v), m) in jobs.into_iter().zip(maps) {
            self.episodes[e].views[v].features = Some(m?);
        }
        self.ae_checksum = Some(ae_checksum);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        let put32 = |b: &mut Vec<u8>, v: u32| b.extend_from_slice(&v.to_le_bytes());
        put32(&mut body, self.views_per_episode() as u32);
        for v in self.intrinsics {
            body.extend_from_slice(&v.to_le_bytes());
        }
        body.extend_from_slice(&self.seed.to_le_bytes());
        body.extend_from_slice(&self.semantic_seed.to_le_bytes());
        let present = self.has_features();
        body.push(u8::from(present));
        put32(&mut body, self.ae_checksum.unwrap_or(0));
        for ep in &self.episodes {
            body.extend_from_slice(&ep.scene_seed.to_le_bytes());
            let tables = LabelTables { objects: ep.objects.clone(), gaussians: ep.gaussian_labels.clone() };
            let json = serde_json::to_vec(&tables).expect("label tables serialize");
            put32(&mut body, json.len() as u32);
            body.extend_from_slice(&json);
            for v in &ep.views {
                for p in v.pose {
                    body.extend_from_slice(&p.to_le_bytes());
                }
                body.extend_from_slice(&v.rgb);
                for d in &v.depth {
                    body.extend_from_slice(&d.to_le_bytes());
                }
                body.extend_from_slice(&v.labels);
                if present {
                    for f in v.features.as_ref().expect("checked") {
                        body.extend_from_slice(&f.to_le_bytes());
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(HEADER_LEN + body.len());
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.width as u32, self.height as u32, self.episodes.len() as u32, crc32fast::hash(&body)] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, SceneError> {
        if buf.len() < HEADER_LEN || &buf[..6] != MAGIC {
            return Err(SceneError::Format("not a dataset file".into()));
        }
        let mut h = Reader { buf: &buf[..HEADER_LEN], pos: 6 };
        let version = h.u32()?;
        if version != VERSION {
            return Err(SceneError::Format(format!("unsupported version {version}")));
        }
        let (width, height, count) = (h.u32()? as usize, h.u32()? as usize, h.u32()? as usize);
        let stored = h.u32()?;
        let body = &buf[HEADER_LEN..];
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(SceneError::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 0 };
        let nv = r.u32()? as usize;
        let intrinsics = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
        let seed = r.u64()?;
        let semantic_seed = r.u64()?;
        let present = r.take(1)?[0] != 0;
        let ae = r.u32()?;
        let npix = width * height;
        let mut episodes = Vec::with_capacity(count);
        for _ in 0..count {
            let scene_seed = r.u64()?;
            let jl = r.u32()? as usize;
            let tables: LabelTables =
                serde_json::from_slice(r.take(jl)?).map_err(|e| SceneError::Format(format!("label tables: {e}")))?;
            let mut views = Vec::with_capacity(nv);
            for _ in 0..nv {
                let mut pose = [0.0; 12];
                for p in &mut pose {
                    *p = r.f64()?;
                }
                let rgb = r.take(npix * 3)?.to_vec();
                let depth = r.f32s(npix)?;
                let labels = r.take(npix)?.to_vec();
                let features = if present { Some(r.f32s(npix * 3)?) } else { None };
                views.push(View { pose, rgb, depth, labels, features });
            }
            episodes.push(Episode { scene_seed, objects: tables.objects, gaussian_labels: tables.gaussians, views });
        }
        if r.pos != body.len() {
            return Err(SceneError::Format("trailing bytes".into()));
        }
        Ok(Self { width, height, intrinsics, seed, semantic_seed, ae_checksum: present.then_some(ae), episodes })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SceneError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SceneError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
