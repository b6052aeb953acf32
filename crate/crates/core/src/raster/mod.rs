//! Differentiable tile-based Gaussian splatting.
//!
//! The forward pass projects every primitive, sorts all of them once by
//! camera-space depth (ties by storage index) and blends front to back
//! inside 16×16 pixel tiles. Tiles own disjoint pixels, so they can be
//! processed concurrently with bit-identical results.

mod backward;
pub mod dump;
mod oracle;

pub use backward::{render_backward, CloudGrads};
pub use oracle::brute_force_render;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use thiserror::Error;

use crate::geom::{self, Camera, Quaternion};
use crate::par;

/// Channel count of the per-primitive semantic feature.
pub const FEATURE_DIM: usize = 3;
/// Upper bound on a single splat's alpha.
pub const MAX_ALPHA: f64 = 0.99;
/// Smallest 2D covariance determinant treated as invertible.
pub const MIN_COV_DET: f64 = 1e-12;
/// Tail level used for tile bounds when the alpha cutoff is disabled.
const TAIL_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("gaussian {index}: {reason}")]
    InvalidGaussian { index: usize, reason: String },
    #[error("gradient buffer has {got} values, expected {expected}")]
    GradientShape { got: usize, expected: usize },
    #[error("forward state does not match the cloud/camera ({0})")]
    StaleState(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    pub rotation: Quaternion,
    pub scale: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub feature: [f64; FEATURE_DIM],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        Self { gaussians }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(&self) -> Result<(), RasterError> {
        for (index, g) in self.gaussians.iter().enumerate() {
            let bad = |reason: String| Err(RasterError::InvalidGaussian { index, reason });
            if !(g.opacity > 0.0 && g.opacity < 1.0) {
                return bad(format!("opacity {} outside (0,1)", g.opacity));
            }
            if (g.rotation.norm() - 1.0).abs() > 1e-6 {
                return bad(format!("quaternion norm {}", g.rotation.norm()));
            }
            if !g.scale.iter().all(|s| *s > 0.0) {
                return bad(format!("scale {:?}", g.scale));
            }
            if !g.mean.iter().all(|v| v.is_finite()) {
                return bad("non-finite mean".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterConfig {
    /// Per-pixel contributions with alpha below this are skipped.
    pub alpha_min: f64,
    /// Blending for a pixel stops once transmittance falls below this.
    pub min_transmittance: f64,
    pub tile_size: usize,
    /// Use the worker pool when the `parallel` feature is enabled.
    pub parallel: bool,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self { alpha_min: 1.0 / 255.0, min_transmittance: 1e-4, tile_size: 16, parallel: true }
    }
}

impl RasterConfig {
    /// No alpha cutoff and no early termination.
    pub fn exact() -> Self {
        Self { alpha_min: 0.0, min_transmittance: 0.0, ..Self::default() }
    }

    pub fn sequential(mut self) -> Self {
        self.parallel = false;
        self
    }
}

/// Rendered maps, all row-major with channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// H×W×3.
    pub color: Vec<f64>,
    /// H×W×3.
    pub feature: Vec<f64>,
    /// H×W, equal to `1 - transmittance`.
    pub alpha: Vec<f64>,
    /// H×W final transmittance.
    pub transmittance: Vec<f64>,
    /// H×W accumulated `Σ zᵢ αᵢ Tᵢ` (not normalized by alpha).
    pub depth: Vec<f64>,
}

impl RenderOutput {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            color: vec![0.0; n * 3],
            feature: vec![0.0; n * FEATURE_DIM],
            alpha: vec![0.0; n],
            transmittance: vec![1.0; n],
            depth: vec![0.0; n],
        }
    }

    /// Expected depth `Σ zαT / Σ αT` where the pixel alpha reaches `min_alpha`, else 0.
    pub fn normalized_depth(&self, min_alpha: f64) -> Vec<f64> {
        self.depth.iter().zip(&self.alpha).map(|(d, a)| if *a >= min_alpha && *a > 0.0 { d / a } else { 0.0 }).collect()
    }
}

/// Alpha of a splat at pixel position `x`: `o·exp(-½ dᵀ Σ′⁻¹ d)` clamped to 0.99.
///
/// Returns `None` when `Σ′` is singular.
pub fn gaussian_alpha_2d(opacity: f64, mean: [f64; 2], cov: &Matrix2<f64>, x: [f64; 2]) -> Option<f64> {
    let det = cov.determinant();
    if !(det > MIN_COV_DET) {
        return None;
    }
    let conic = conic_from_cov(cov, det);
    Some(eval_alpha(opacity, mean, conic, x[0], x[1]).alpha)
}

fn conic_from_cov(cov: &Matrix2<f64>, det: f64) -> [f64; 3] {
    [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det]
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AlphaEval {
    pub alpha: f64,
    pub gauss: f64,
    pub dx: f64,
    pub dy: f64,
    pub clamped: bool,
}

#[inline]
pub(crate) fn eval_alpha(opacity: f64, mean: [f64; 2], conic: [f64; 3], px: f64, py: f64) -> AlphaEval {
    let dx = px - mean[0];
    let dy = py - mean[1];
    let power = -0.5 * (conic[0] * dx * dx + 2.0 * conic[1] * dx * dy + conic[2] * dy * dy);
    let gauss = power.exp();
    let raw = opacity * gauss;
    let clamped = raw > MAX_ALPHA;
    AlphaEval { alpha: if clamped { MAX_ALPHA } else { raw }, gauss, dx, dy, clamped }
}

/// Pixel-center coordinate of column/row index `i`.
#[inline]
pub fn pixel_center(i: usize) -> f64 {
    i as f64 + 0.5
}

/// A primitive after projection onto the image plane.
#[derive(Debug, Clone)]
pub(crate) struct Splat {
    pub index: usize,
    pub mean2: [f64; 2],
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    /// `J W` at the primitive's mean.
    pub jw: Matrix2x3<f64>,
    pub rot: Matrix3<f64>,
    /// Inclusive pixel-index bounds `[x0, y0, x1, y1]`.
    pub bbox: [usize; 4],
}

/// Forward-pass bookkeeping needed by [`render_backward`].
#[derive(Debug, Clone)]
pub struct RasterState {
    pub(crate) config: RasterConfig,
    pub(crate) width: usize,
    pub(crate) height: usize,
    pub(crate) cloud_len: usize,
    /// Visible splats in global blending order.
    pub(crate) splats: Vec<Splat>,
    /// Per tile, indices into `splats` in blending order.
    pub(crate) tiles: Vec<Vec<u32>>,
    pub(crate) tiles_x: usize,
}

impl RasterState {
    pub fn config(&self) -> &RasterConfig {
        &self.config
    }

    pub fn visible_count(&self) -> usize {
        self.splats.len()
    }

    pub(crate) fn tile_pixels(&self, tile: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let ts = self.config.tile_size;
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * ts;
        let y0 = ty * ts;
        (x0..(x0 + ts).min(self.width), y0..(y0 + ts).min(self.height))
    }
}

fn prepare_splat(index: usize, g: &Gaussian, cam: &Camera, cfg: &RasterConfig) -> Option<Splat> {
    let p = cam.world_to_camera(&g.mean);
    if p.z <= geom::MIN_DEPTH {
        return None;
    }
    let rot = geom::quat_to_rotmat(g.rotation).ok()?;
    let m = rot * Matrix3::from_diagonal(&Vector3::from(g.scale));
    let sigma = m * m.transpose();
    let j = geom::projection_jacobian(&p, cam.fx, cam.fy);
    let w = cam.view_rotation();
    let pc = geom::project_covariance_with(&sigma, &j, &w);
    if pc.is_degenerate() {
        return None;
    }
    let det = pc.cov.determinant();
    if !(det > MIN_COV_DET) {
        return None;
    }
    let thr = cfg.alpha_min.max(TAIL_EPS);
    if g.opacity <= thr {
        return None;
    }
    let mean2 = [cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy];
    let radius = (2.0 * (g.opacity / thr).ln() * geom::max_eigenvalue_2x2(&pc.cov)).sqrt();
    // pixel j has center j + 0.5
    let lo = |c: f64| (c - radius - 0.5).ceil();
    let hi = |c: f64| (c + radius - 0.5).floor();
    let (x0, x1, y0, y1) = (lo(mean2[0]), hi(mean2[0]), lo(mean2[1]), hi(mean2[1]));
    if x1 < 0.0 || y1 < 0.0 || x0 > (cam.width - 1) as f64 || y0 > (cam.height - 1) as f64 || x0 > x1 || y0 > y1 {
        return None;
    }
    let clampi = |v: f64, max: usize| v.max(0.0).min(max as f64) as usize;
    let bbox =
        [clampi(x0, cam.width - 1), clampi(y0, cam.height - 1), clampi(x1, cam.width - 1), clampi(y1, cam.height - 1)];
    Some(Splat {
        index,
        mean2,
        conic: conic_from_cov(&pc.cov, det),
        depth: p.z,
        opacity: g.opacity,
        jw: j * w,
        rot,
        bbox,
    })
}

/// Projects, sorts and bins the cloud into tiles.
pub fn prepare(cloud: &GaussianCloud, cam: &Camera, cfg: &RasterConfig) -> RasterState {
    assert!(cfg.tile_size > 0, "tile size must be positive");
    let mut splats: Vec<Splat> =
        par::map_indexed(cloud.len(), cfg.parallel, |i| prepare_splat(i, &cloud.gaussians[i], cam, cfg))
            .into_iter()
            .flatten()
            .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let ts = cfg.tile_size;
    let tiles_x = cam.width.div_ceil(ts);
    let tiles_y = cam.height.div_ceil(ts);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        let [x0, y0, x1, y1] = s.bbox;
        for ty in y0 / ts..=y1 / ts {
            for tx in x0 / ts..=x1 / ts {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    RasterState {
        config: cfg.clone(),
        width: cam.width,
        height: cam.height,
        cloud_len: cloud.len(),
        splats,
        tiles,
        tiles_x,
    }
}

struct TileOut {
    color: Vec<[f64; 3]>,
    feature: Vec<[f64; FEATURE_DIM]>,
    trans: Vec<f64>,
    depth: Vec<f64>,
}

fn blend_tile(cloud: &GaussianCloud, state: &RasterState, tile: usize) -> TileOut {
    let (xs, ys) = state.tile_pixels(tile);
    let n = xs.len() * ys.len();
    let mut out = TileOut {
        color: Vec::with_capacity(n),
        feature: Vec::with_capacity(n),
        trans: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
    };
    let cfg = &state.config;
    let list = &state.tiles[tile];
    for py in ys.clone() {
        for px in xs.clone() {
            let (fx, fy) = (pixel_center(px), pixel_center(py));
            let mut t = 1.0;
            let mut c = [0.0; 3];
            let mut f = [0.0; FEATURE_DIM];
            let mut d = 0.0;
            for &k in list {
                let s = &state.splats[k as usize];
                let [x0, y0, x1, y1] = s.bbox;
                if px < x0 || px > x1 || py < y0 || py > y1 {
                    continue;
                }
                let a = eval_alpha(s.opacity, s.mean2, s.conic, fx, fy).alpha;
                if a < cfg.alpha_min || a <= 0.0 {
                    continue;
                }
                let g = &cloud.gaussians[s.index];
                let w = a * t;
                for ch in 0..3 {
                    c[ch] += g.color[ch] * w;
                }
                for ch in 0..FEATURE_DIM {
                    f[ch] += g.feature[ch] * w;
                }
                d += s.depth * w;
                t *= 1.0 - a;
                if t < cfg.min_transmittance {
                    break;
                }
            }
            out.color.push(c);
            out.feature.push(f);
            out.trans.push(t);
            out.depth.push(d);
        }
    }
    out
}

/// Renders with an explicit configuration and returns the state for backward.
pub fn render(cloud: &GaussianCloud, cam: &Camera, cfg: &RasterConfig) -> (RenderOutput, RasterState) {
    let state = prepare(cloud, cam, cfg);
    let tiles = par::map_indexed(state.tiles.len(), cfg.parallel, |t| blend_tile(cloud, &state, t));
    let mut out = RenderOutput::zeros(cam.width, cam.height);
    for (tile, to) in tiles.into_iter().enumerate() {
        let (xs, ys) = state.tile_pixels(tile);
        let mut k = 0;
        for py in ys {
            for px in xs.clone() {
                let p = py * cam.width + px;
                out.color[p * 3..p * 3 + 3].copy_from_slice(&to.color[k]);
                out.feature[p * FEATURE_DIM..(p + 1) * FEATURE_DIM].copy_from_slice(&to.feature[k]);
                out.transmittance[p] = to.trans[k];
                out.alpha[p] = 1.0 - to.trans[k];
                out.depth[p] = to.depth[k];
                k += 1;
            }
        }
    }
    (out, state)
}

/// Renders with the default configuration.
pub fn render_forward(cloud: &GaussianCloud, cam: &Camera) -> RenderOutput {
    render(cloud, cam, &RasterConfig::default()).0
}

/// Index of the primitive with the largest blending weight per pixel, for
/// pixels whose accumulated alpha reaches `min_alpha`.
pub fn dominant_contributor(state: &RasterState, cloud: &GaussianCloud, min_alpha: f64) -> Vec<Option<usize>> {
    let cfg = &state.config;
    let tiles = par::map_indexed(state.tiles.len(), cfg.parallel, |tile| {
        let (xs, ys) = state.tile_pixels(tile);
        let mut res = Vec::with_capacity(xs.len() * ys.len());
        for py in ys.clone() {
            for px in xs.clone() {
                let mut t = 1.0;
                let mut best: Option<(f64, usize)> = None;
                for &k in &state.tiles[tile] {
                    let s = &state.splats[k as usize];
                    let [x0, y0, x1, y1] = s.bbox;
                    if px < x0 || px > x1 || py < y0 || py > y1 {
                        continue;
                    }
                    let a = eval_alpha(s.opacity, s.mean2, s.conic, pixel_center(px), pixel_center(py)).alpha;
                    if a < cfg.alpha_min || a <= 0.0 {
                        continue;
                    }
                    let w = a * t;
                    if best.map_or(true, |(bw, _)| w > bw) {
                        best = Some((w, s.index));
                    }
                    t *= 1.0 - a;
                    if t < cfg.min_transmittance {
                        break;
                    }
                }
                res.push(if 1.0 - t >= min_alpha { best.map(|b| b.1) } else { None });
            }
        }
        res
    });
    debug_assert_eq!(state.cloud_len, cloud.len());
    let mut out = vec![None; state.width * state.height];
    for (tile, vals) in tiles.into_iter().enumerate() {
        let (xs, ys) = state.tile_pixels(tile);
        let mut k = 0;
        for py in ys {
            for px in xs.clone() {
                out[py * state.width + px] = vals[k];
                k += 1;
            }
        }
    }
    out
}
