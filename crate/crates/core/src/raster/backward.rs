//! Reverse pass of the tile rasterizer.
//!
//! Only rotation, scale, opacity and feature receive gradients; means and
//! colors are fixed inputs of the splatting model.

use nalgebra::{Matrix2, Matrix3};

use super::{eval_alpha, pixel_center, GaussianCloud, RasterError, RasterState, FEATURE_DIM};
use crate::geom;
use crate::par;

/// Gradients for each primitive in storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGrads {
    pub rotation: Vec<[f64; 4]>,
    pub scale: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    pub feature: Vec<[f64; FEATURE_DIM]>,
}

impl CloudGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            rotation: vec![[0.0; 4]; n],
            scale: vec![[0.0; 3]; n],
            opacity: vec![0.0; n],
            feature: vec![[0.0; FEATURE_DIM]; n],
        }
    }
}

// conic a, b, c; opacity; feature
const SLOTS: usize = 4 + FEATURE_DIM;

struct Hit {
    splat: usize,
    alpha: f64,
    gauss: f64,
    dx: f64,
    dy: f64,
    clamped: bool,
    t_before: f64,
}

fn tile_grads(
    cloud: &GaussianCloud,
    state: &RasterState,
    tile: usize,
    d_color: &[f64],
    d_feature: &[f64],
) -> Vec<[f64; SLOTS]> {
    let list = &state.tiles[tile];
    let mut acc = vec![[0.0; SLOTS]; list.len()];
    let cfg = &state.config;
    let (xs, ys) = state.tile_pixels(tile);
    let mut hits: Vec<(usize, Hit)> = Vec::new();
    for py in ys {
        for px in xs.clone() {
            let pix = py * state.width + px;
            let gc = &d_color[pix * 3..pix * 3 + 3];
            let gf = &d_feature[pix * FEATURE_DIM..(pix + 1) * FEATURE_DIM];
            if gc.iter().chain(gf).all(|v| *v == 0.0) {
                continue;
            }
            // replay the forward blend for this pixel
            hits.clear();
            let mut t = 1.0;
            for (slot, &k) in list.iter().enumerate() {
                let s = &state.splats[k as usize];
                let [x0, y0, x1, y1] = s.bbox;
                if px < x0 || px > x1 || py < y0 || py > y1 {
                    continue;
                }
                let e = eval_alpha(s.opacity, s.mean2, s.conic, pixel_center(px), pixel_center(py));
                if e.alpha < cfg.alpha_min || e.alpha <= 0.0 {
                    continue;
                }
                hits.push((
                    slot,
                    Hit {
                        splat: k as usize,
                        alpha: e.alpha,
                        gauss: e.gauss,
                        dx: e.dx,
                        dy: e.dy,
                        clamped: e.clamped,
                        t_before: t,
                    },
                ));
                t *= 1.0 - e.alpha;
                if t < cfg.min_transmittance {
                    break;
                }
            }
            // back to front, carrying the weighted sum of everything behind
            let mut behind_c = [0.0; 3];
            let mut behind_f = [0.0; FEATURE_DIM];
            for (slot, h) in hits.iter().rev() {
                let g = &cloud.gaussians[state.splats[h.splat].index];
                let w = h.alpha * h.t_before;
                let one_minus = 1.0 - h.alpha;
                let mut d_alpha = 0.0;
                for ch in 0..3 {
                    d_alpha += gc[ch] * (h.t_before * g.color[ch] - behind_c[ch] / one_minus);
                }
                for ch in 0..FEATURE_DIM {
                    d_alpha += gf[ch] * (h.t_before * g.feature[ch] - behind_f[ch] / one_minus);
                }
                let a = &mut acc[*slot];
                for ch in 0..FEATURE_DIM {
                    a[4 + ch] += gf[ch] * w;
                }
                if !h.clamped {
                    let s = &state.splats[h.splat];
                    a[3] += d_alpha * h.gauss;
                    let d_power = d_alpha * s.opacity * h.gauss;
                    a[0] += d_power * (-0.5 * h.dx * h.dx);
                    a[1] += d_power * (-h.dx * h.dy);
                    a[2] += d_power * (-0.5 * h.dy * h.dy);
                }
                for ch in 0..3 {
                    behind_c[ch] += g.color[ch] * w;
                }
                for ch in 0..FEATURE_DIM {
                    behind_f[ch] += g.feature[ch] * w;
                }
            }
        }
    }
    acc
}

/// Backpropagates image-space gradients (`dL/dcolor`, `dL/dfeature`, both
/// H×W×3 interleaved) to the per-primitive trainable parameters.
pub fn render_backward(
    cloud: &GaussianCloud,
    state: &RasterState,
    d_color: &[f64],
    d_feature: &[f64],
) -> Result<CloudGrads, RasterError> {
    let npix = state.width * state.height;
    if d_color.len() != npix * 3 {
        return Err(RasterError::GradientShape { got: d_color.len(), expected: npix * 3 });
    }
    if d_feature.len() != npix * FEATURE_DIM {
        return Err(RasterError::GradientShape { got: d_feature.len(), expected: npix * FEATURE_DIM });
    }
    if state.cloud_len != cloud.len() {
        return Err(RasterError::StaleState(format!(
            "cloud has {} primitives, state {}",
            cloud.len(),
            state.cloud_len
        )));
    }

    let per_tile =
        par::map_indexed(state.tiles.len(), state.config.parallel, |t| tile_grads(cloud, state, t, d_color, d_feature));
    // fixed tile order keeps the reduction deterministic
    let mut per_splat = vec![[0.0; SLOTS]; state.splats.len()];
    for (tile, acc) in per_tile.into_iter().enumerate() {
        for (slot, v) in acc.into_iter().enumerate() {
            let k = state.tiles[tile][slot] as usize;
            for i in 0..SLOTS {
                per_splat[k][i] += v[i];
            }
        }
    }

    let mut grads = CloudGrads::zeros(cloud.len());
    for (s, g) in state.splats.iter().zip(&per_splat) {
        let idx = s.index;
        grads.opacity[idx] = g[3];
        grads.feature[idx].copy_from_slice(&g[4..4 + FEATURE_DIM]);

        // conic = Σ′⁻¹  =>  dΣ′ = -Σ′⁻¹ dConic Σ′⁻¹
        let conic = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
        let d_conic = Matrix2::new(g[0], 0.5 * g[1], 0.5 * g[1], g[2]);
        let d_cov2 = -(conic * d_conic * conic);
        // Σ′ = T Σ Tᵀ + dilation
        let d_sigma: Matrix3<f64> = s.jw.transpose() * d_cov2 * s.jw;
        // Σ = M Mᵀ, M = R diag(s)
        let scale = cloud.gaussians[idx].scale;
        let m = s.rot * Matrix3::from_diagonal(&nalgebra::Vector3::from(scale));
        let d_m = (d_sigma + d_sigma.transpose()) * m;
        let mut d_rot = Matrix3::zeros();
        for j in 0..3 {
            let mut acc = 0.0;
            for i in 0..3 {
                acc += d_m[(i, j)] * s.rot[(i, j)];
                d_rot[(i, j)] = d_m[(i, j)] * scale[j];
            }
            grads.scale[idx][j] = acc;
        }
        grads.rotation[idx] = geom::quat_to_rotmat_vjp(cloud.gaussians[idx].rotation, &d_rot)
            .expect("visible splats have a valid rotation");
    }
    Ok(grads)
}
