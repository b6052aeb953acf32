use nalgebra::Vector2;

use super::{pixel_center, GaussianCloud, RenderOutput, FEATURE_DIM, MAX_ALPHA};
use crate::geom::{self, Camera};

/// Reference renderer: every pixel sorts every visible primitive and blends
/// all of them. No tiling, no cutoff, no early termination.
pub fn brute_force_render(cloud: &GaussianCloud, cam: &Camera) -> RenderOutput {
    struct Proj {
        depth: f64,
        index: usize,
        mean: Vector2<f64>,
        inv: nalgebra::Matrix2<f64>,
    }
    let mut projected = Vec::new();
    for (index, g) in cloud.gaussians.iter().enumerate() {
        let Some(p) = geom::project_point(&g.mean, cam) else { continue };
        let Ok(sigma) = geom::covariance_3d(g.rotation, g.scale) else { continue };
        let pc = geom::project_covariance(&sigma, &g.mean, cam);
        if pc.is_degenerate() {
            continue;
        }
        let Some(inv) = pc.cov.try_inverse() else { continue };
        projected.push(Proj { depth: p.depth, index, mean: Vector2::new(p.u, p.v), inv });
    }

    let mut out = RenderOutput::zeros(cam.width, cam.height);
    for py in 0..cam.height {
        for px in 0..cam.width {
            let x = Vector2::new(pixel_center(px), pixel_center(py));
            let mut hits: Vec<(f64, usize, f64)> = projected
                .iter()
                .map(|p| {
                    let d = x - p.mean;
                    let m = (d.transpose() * p.inv * d)[(0, 0)];
                    let a = (cloud.gaussians[p.index].opacity * (-0.5 * m).exp()).min(MAX_ALPHA);
                    (p.depth, p.index, a)
                })
                .collect();
            hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let pix = py * cam.width + px;
            let mut t = 1.0;
            for (depth, index, a) in hits {
                let g = &cloud.gaussians[index];
                for ch in 0..3 {
                    out.color[pix * 3 + ch] += g.color[ch] * a * t;
                }
                for ch in 0..FEATURE_DIM {
                    out.feature[pix * FEATURE_DIM + ch] += g.feature[ch] * a * t;
                }
                out.depth[pix] += depth * a * t;
                t *= 1.0 - a;
            }
            out.transmittance[pix] = t;
            out.alpha[pix] = 1.0 - t;
        }
    }
    out
}
