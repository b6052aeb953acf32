//! Photometric and feature losses.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5). Near the border the window
//! is clipped to the image and renormalized, so constant images produce the
//! closed-form value everywhere.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
pub const PSNR_CAP: f64 = 60.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels }
    }

    pub fn len(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

fn check(shape: ImageShape, a: &[f64], b: &[f64]) -> Result<(), LossError> {
    if a.len() != shape.len() || b.len() != shape.len() {
        return Err(LossError::Shape(format!("{} and {} values for a {shape:?} image", a.len(), b.len())));
    }
    if shape.is_empty() {
        return Err(LossError::Shape("empty image".into()));
    }
    Ok(())
}

/// Loss weights. `lambda` mixes L1 and SSIM, `eta` mixes L1 and cosine,
/// `beta1`/`beta2` weight the photometric and feature terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda: f64,
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_iters: u64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.8, eta: 0.99, beta1: 0.4, beta2: 0.6, warmup_iters: 500 }
    }
}

impl LossWeights {
    /// Warm-up length used for the full-size setting.
    pub const FULL_SCALE_WARMUP: u64 = 5000;

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.lambda) || !(0.0..=1.0).contains(&self.eta) {
            return Err(format!("lambda and eta must lie in [0,1] (got {}, {})", self.lambda, self.eta));
        }
        Ok(())
    }

    /// Whether the feature term participates at iteration `iter`.
    pub fn feature_active(&self, iter: u64) -> bool {
        iter >= self.warmup_iters
    }
}

fn window_taps() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut g = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    g
}

/// Separable Gaussian filter over an H×W plane. With `normalize`, each
/// output is divided by the sum of the taps that fell inside the image.
fn filter(plane: &[f64], w: usize, h: usize, normalize: bool) -> Vec<f64> {
    let g = window_taps();
    let r = SSIM_RADIUS as isize;
    let pass = |src: &[f64], len: usize, stride: usize, count: usize, step: usize| {
        let mut out = vec![0.0; src.len()];
        for line in 0..count {
            let base = line * step;
            for i in 0..len as isize {
                let (mut acc, mut norm) = (0.0, 0.0);
                for k in -r..=r {
                    let j = i + k;
                    if j >= 0 && j < len as isize {
                        let tap = g[(k + r) as usize];
                        acc += tap * src[base + j as usize * stride];
                        norm += tap;
                    }
                }
                out[base + i as usize * stride] = if normalize { acc / norm } else { acc };
            }
        }
        out
    };
    let rows = pass(plane, w, 1, h, w);
    pass(&rows, h, w, w, 1)
}

fn valid_tap_sum(len: usize) -> Vec<f64> {
    let g = window_taps();
    let r = SSIM_RADIUS as isize;
    (0..len as isize)
        .map(|i| (-r..=r).filter(|k| (0..len as isize).contains(&(i + k))).map(|k| g[(k + r) as usize]).sum())
        .collect()
}

struct SsimPlane {
    mean: f64,
    grad: Option<Vec<f64>>,
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize, want_grad: bool) -> SsimPlane {
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter(a, w, h, true);
    let mu_b = filter(b, w, h, true);
    let e_aa = filter(&sq(a, a), w, h, true);
    let e_bb = filter(&sq(b, b), w, h, true);
    let e_ab = filter(&sq(a, b), w, h, true);
    let n = w * h;
    let mut total = 0.0;
    let (mut ca, mut cb, mut cc) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for p in 0..n {
        let (ma, mb) = (mu_a[p], mu_b[p]);
        let var_a = e_aa[p] - ma * ma;
        let var_b = e_bb[p] - mb * mb;
        let cov = e_ab[p] - ma * mb;
        let n1 = 2.0 * ma * mb + SSIM_C1;
        let n2 = 2.0 * cov + SSIM_C2;
        let d1 = ma * ma + mb * mb + SSIM_C1;
        let d2 = var_a + var_b + SSIM_C2;
        let den = d1 * d2;
        let s = n1 * n2 / den;
        total += s;
        if want_grad {
            // partials with respect to mu_b, E[b²], E[ab]
            ca[p] = (2.0 * ma * n2 - 2.0 * ma * n1) / den - s * (2.0 * mb * d2 - 2.0 * mb * d1) / den;
            cb[p] = -s / d2;
            cc[p] = 2.0 * n1 / den;
        }
    }
    let grad = want_grad.then(|| {
        // adjoint of the normalized filter: divide by the tap sums, then filter unnormalized
        let zx = valid_tap_sum(w);
        let zy = valid_tap_sum(h);
        let scale = |m: &mut Vec<f64>| {
            for y in 0..h {
                for x in 0..w {
                    m[y * w + x] /= zx[x] * zy[y];
                }
            }
        };
        scale(&mut ca);
        scale(&mut cb);
        scale(&mut cc);
        let ta = filter(&ca, w, h, false);
        let tb = filter(&cb, w, h, false);
        let tc = filter(&cc, w, h, false);
        (0..n).map(|q| ta[q] + 2.0 * b[q] * tb[q] + a[q] * tc[q]).collect()
    });
    SsimPlane { mean: total / n as f64, grad }
}

fn split_channel(img: &[f64], shape: ImageShape, c: usize) -> Vec<f64> {
    img.iter().skip(c).step_by(shape.channels).copied().collect()
}

fn ssim_impl(a: &[f64], b: &[f64], shape: ImageShape, want_grad: bool) -> Result<(f64, Option<Vec<f64>>), LossError> {
    check(shape, a, b)?;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; shape.len()]);
    for c in 0..shape.channels {
        let pa = split_channel(a, shape, c);
        let pb = split_channel(b, shape, c);
        let r = ssim_plane(&pa, &pb, shape.width, shape.height, want_grad);
        total += r.mean;
        if let (Some(g), Some(pg)) = (grad.as_mut(), r.grad) {
            let scale = 1.0 / (shape.pixels() * shape.channels) as f64;
            for (p, v) in pg.into_iter().enumerate() {
                g[p * shape.channels + c] = v * scale;
            }
        }
    }
    Ok((total / shape.channels as f64, grad))
}

/// Mean SSIM over pixels and channels.
pub fn ssim(a: &[f64], b: &[f64], shape: ImageShape) -> Result<f64, LossError> {
    Ok(ssim_impl(a, b, shape, false)?.0)
}

/// SSIM and its gradient with respect to `b`.
pub fn ssim_with_grad(a: &[f64], b: &[f64], shape: ImageShape) -> Result<(f64, Vec<f64>), LossError> {
    let (v, g) = ssim_impl(a, b, shape, true)?;
    Ok((v, g.expect("requested")))
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn l1_grad(target: &[f64], rendered: &[f64], scale: f64) -> Vec<f64> {
    let n = target.len() as f64;
    target
        .iter()
        .zip(rendered)
        .map(|(t, r)| {
            if r > t {
                scale / n
            } else if r < t {
                -scale / n
            } else {
                0.0
            }
        })
        .collect()
}

/// `λ·mean|t − r| + (1 − λ)·(1 − SSIM(t, r))`.
pub fn loss_gs(target: &[f64], rendered: &[f64], shape: ImageShape, lambda: f64) -> Result<f64, LossError> {
    let s = ssim(target, rendered, shape)?;
    Ok(lambda * mean_abs(target, rendered) + (1.0 - lambda) * (1.0 - s))
}

/// Photometric loss with its gradient, plus the SSIM value for logging.
pub fn loss_gs_with_grad(
    target: &[f64],
    rendered: &[f64],
    shape: ImageShape,
    lambda: f64,
) -> Result<(f64, Vec<f64>, f64), LossError> {
    let (s, ds) = ssim_with_grad(target, rendered, shape)?;
    let loss = lambda * mean_abs(target, rendered) + (1.0 - lambda) * (1.0 - s);
    let mut g = l1_grad(target, rendered, lambda);
    for (gi, d) in g.iter_mut().zip(ds) {
        *gi -= (1.0 - lambda) * d;
    }
    Ok((loss, g, s))
}

/// Per-pixel cosine over `dim`-channel vectors, averaged over pixels.
/// Pixels where either vector has zero norm contribute 0.
pub fn mean_cosine(a: &[f64], b: &[f64], dim: usize) -> f64 {
    let n = a.len() / dim;
    let total: f64 = a.chunks(dim).zip(b.chunks(dim)).map(|(x, y)| cosine(x, y)).sum();
    total / n as f64
}

/// Mean cosine restricted to pixels where `target` is nonzero; `None` if there are none.
pub fn mean_cosine_on_support(target: &[f64], rendered: &[f64], dim: usize) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, r) in target.chunks(dim).zip(rendered.chunks(dim)) {
        if t.iter().any(|v| *v != 0.0) {
            total += cosine(t, r);
            count += 1;
        }
    }
    (count > 0).then(|| total / count as f64)
}

fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return 0.0;
    }
    x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (nx * ny)
}

/// `η·mean|t − r| + (1 − η)·(1 − mean cosine)` over `dim`-channel feature maps.
pub fn loss_feat(target: &[f64], rendered: &[f64], dim: usize, eta: f64) -> Result<f64, LossError> {
    if target.len() != rendered.len() || target.is_empty() || target.len() % dim != 0 {
        return Err(LossError::Shape(format!("feature maps of {} and {} values", target.len(), rendered.len())));
    }
    Ok(eta * mean_abs(target, rendered) + (1.0 - eta) * (1.0 - mean_cosine(target, rendered, dim)))
}

/// Feature loss, its gradient with respect to `rendered`, and the mean cosine.
pub fn loss_feat_with_grad(
    target: &[f64],
    rendered: &[f64],
    dim: usize,
    eta: f64,
) -> Result<(f64, Vec<f64>, f64), LossError> {
    let loss = loss_feat(target, rendered, dim, eta)?;
    let cos = mean_cosine(target, rendered, dim);
    let mut g = l1_grad(target, rendered, eta);
    let npix = (target.len() / dim) as f64;
    for ((gp, t), r) in g.chunks_mut(dim).zip(target.chunks(dim)).zip(rendered.chunks(dim)) {
        let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nt == 0.0 || nr == 0.0 {
            continue;
        }
        let dot: f64 = t.iter().zip(r).map(|(a, b)| a * b).sum();
        for k in 0..dim {
            let dcos = t[k] / (nt * nr) - dot * r[k] / (nt * nr * nr * nr);
            gp[k] -= (1.0 - eta) * dcos / npix;
        }
    }
    Ok((loss, g, cos))
}

/// `β₁·L_gs`, plus `β₂·L_feat` once warm-up is over.
pub fn loss_total(l_gs: f64, l_feat: f64, weights: &LossWeights, iter: u64) -> f64 {
    if weights.feature_active(iter) {
        weights.beta1 * l_gs + weights.beta2 * l_feat
    } else {
        weights.beta1 * l_gs
    }
}

/// `10·log10(1/MSE)` for [0,1] images, capped at 60 dB.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}
