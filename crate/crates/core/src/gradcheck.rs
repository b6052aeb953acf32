//! Central-difference gradient checks for the rasterizer, the layer toolkit
//! and the full encoder-to-loss chain.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::geom::{Camera, Quaternion};
use crate::losses::LossWeights;
use crate::model::{ModelError, RepresentationModel, Sample};
use crate::nnkit::{Activation, Conv2d, Dense, Layer, LayerStack, NnError, Tensor};
use crate::qgfs::{Head, RgbdImage};
use crate::raster::{render, render_backward, Gaussian, GaussianCloud, RasterConfig};

/// Finite-difference step.
pub const STEP: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub checked: usize,
    /// Components with relative error ≤ 1e-3.
    pub within_tight: usize,
    pub max_rel: f64,
    /// Worst component as (label, analytic, numeric).
    pub worst: Option<(String, f64, f64)>,
}

impl CheckReport {
    fn new(name: &str) -> Self {
        Self { name: name.into(), checked: 0, within_tight: 0, max_rel: 0.0, worst: None }
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e <= 1e-3 {
            self.within_tight += 1;
        }
        if e > self.max_rel || self.worst.is_none() {
            self.max_rel = e;
            self.worst = Some((label(), analytic, numeric));
        }
    }

    pub fn tight_fraction(&self) -> f64 {
        if self.checked == 0 {
            return 0.0;
        }
        self.within_tight as f64 / self.checked as f64
    }

    /// At least `fraction` of components within 1e-3 and all within `loose`.
    pub fn passes(&self, fraction: f64, loose: f64) -> bool {
        self.checked > 0 && self.tight_fraction() >= fraction && self.max_rel <= loose
    }
}

fn random_unit_quat(rng: &mut ChaCha8Rng) -> Quaternion {
    loop {
        let a: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        if let Ok(q) = Quaternion::from_array(a).normalized() {
            return q;
        }
    }
}

/// A seeded scene of `count` Gaussians in front of a `size`×`size` camera.
pub fn micro_scene(seed: u64, count: usize, size: usize) -> (GaussianCloud, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = size as f64;
    let cam = Camera::identity_pose(f, f, f / 2.0, f / 2.0, size, size);
    let gaussians = (0..count)
        .map(|_| {
            let z = rng.gen_range(1.5..3.0);
            Gaussian {
                mean: Vector3::new(rng.gen_range(-0.4..0.4) * z, rng.gen_range(-0.4..0.4) * z, z),
                rotation: random_unit_quat(&mut rng),
                scale: std::array::from_fn(|_| rng.gen_range(0.05..0.3)),
                opacity: rng.gen_range(0.1..0.9),
                color: std::array::from_fn(|_| rng.gen()),
                feature: std::array::from_fn(|_| rng.gen_range(-1.0..1.0)),
            }
        })
        .collect();
    (GaussianCloud::new(gaussians), cam)
}

fn probe(cloud: &GaussianCloud, cam: &Camera, wc: &[f64], wf: &[f64]) -> f64 {
    let (out, _) = render(cloud, cam, &RasterConfig::exact());
    out.color.iter().zip(wc).map(|(a, b)| a * b).sum::<f64>()
        + out.feature.iter().zip(wf).map(|(a, b)| a * b).sum::<f64>()
}

/// Rasterizer backward against central differences of a random linear probe
/// on `scenes` micro-scenes of at most five Gaussians at 8×8.
pub fn raster(scenes: usize, seed: u64) -> CheckReport {
    let mut report = CheckReport::new("raster");
    for s in 0..scenes as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (s << 16));
        let count = rng.gen_range(1..=5);
        let (cloud, cam) = micro_scene(seed.wrapping_add(s), count, 8);
        let n = 8 * 8 * 3;
        let wc: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wf: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, state) = render(&cloud, &cam, &RasterConfig::exact());
        let g = render_backward(&cloud, &state, &wc, &wf).expect("shapes match");
        for i in 0..cloud.len() {
            let fd = |f: &dyn Fn(&mut Gaussian, f64)| {
                let mut p = cloud.clone();
                f(&mut p.gaussians[i], STEP);
                let mut m = cloud.clone();
                f(&mut m.gaussians[i], -STEP);
                (probe(&p, &cam, &wc, &wf) - probe(&m, &cam, &wc, &wf)) / (2.0 * STEP)
            };
            for k in 0..4 {
                let d = fd(&|g, e| {
                    let mut a = g.rotation.to_array();
                    a[k] += e;
                    g.rotation = Quaternion::from_array(a);
                });
                report.record(|| format!("scene {s} gaussian {i} q[{k}]"), g.rotation[i][k], d);
            }
            for k in 0..3 {
                let d = fd(&|g, e| g.scale[k] += e);
                report.record(|| format!("scene {s} gaussian {i} s[{k}]"), g.scale[i][k], d);
            }
            let d = fd(&|g, e| g.opacity += e);
            report.record(|| format!("scene {s} gaussian {i} o"), g.opacity[i], d);
            for k in 0..3 {
                let d = fd(&|g, e| g.feature[k] += e);
                report.record(|| format!("scene {s} gaussian {i} f[{k}]"), g.feature[i][k], d);
            }
        }
    }
    report
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn stack_check(
    report: &mut CheckReport,
    tag: &str,
    mut stack: LayerStack,
    x: Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<(), NnError> {
    let (y, tape) = stack.forward(&x)?;
    let w = random_tensor(y.shape(), rng);
    let (dx, grads) = stack.backward(&tape, &w)?;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= STEP;
        let fd = (dot(&w, &stack.infer(&xp)?) - dot(&w, &stack.infer(&xm)?)) / (2.0 * STEP);
        report.record(|| format!("{tag} x[{i}]"), dx.data()[i], fd);
    }
    for (p, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let orig = stack.params()[p].data()[i];
            stack.params_mut()[p].data_mut()[i] = orig + STEP;
            let fp = dot(&w, &stack.infer(&x)?);
            stack.params_mut()[p].data_mut()[i] = orig - STEP;
            let fm = dot(&w, &stack.infer(&x)?);
            stack.params_mut()[p].data_mut()[i] = orig;
            report.record(|| format!("{tag} param {p}[{i}]"), g.data()[i], (fp - fm) / (2.0 * STEP));
        }
    }
    Ok(())
}

/// Layer toolkit backward on a random dense stack and a small conv stack.
pub fn network(seed: u64) -> Result<CheckReport, NnError> {
    let mut report = CheckReport::new("network");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mlp = LayerStack::mlp(&[6, 8, 5, 3], Activation::Tanh, Activation::Sigmoid, &mut rng);
    let x = random_tensor(&[3, 6], &mut rng);
    stack_check(&mut report, "mlp", mlp, x, &mut rng)?;
    let conv = LayerStack::new(vec![
        Layer::Conv(Conv2d::new(2, 3, 4, 2, 1, &mut rng)),
        Layer::Act(Activation::Tanh),
        Layer::Conv(Conv2d::same(3, 2, 3, &mut rng)),
        Layer::GlobalAvgPool,
        Layer::Dense(Dense::new(2, 2, &mut rng)),
    ])?;
    let x = random_tensor(&[2, 6, 6], &mut rng);
    stack_check(&mut report, "conv", conv, x, &mut rng)?;
    Ok(report)
}

/// Two input views of a 4×4 image with one valid depth pixel each, so the
/// predicted cloud holds exactly two Gaussians.
pub fn tiny_sample(seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = 4;
    let n = size * size;
    let cam = |x: f64| {
        Camera::new(4.0, 4.0, 2.0, 2.0, size, size, nalgebra::Matrix3::identity(), Vector3::new(x, 0.0, 0.0))
            .expect("valid")
    };
    let view = |pixel: usize, depth: f64, rng: &mut ChaCha8Rng| {
        let rgb: Vec<f64> = (0..3 * n).map(|_| rng.gen()).collect();
        let mut d = vec![0.0; n];
        d[pixel] = depth;
        RgbdImage::from_parts(size, size, &rgb, &d)
    };
    let inputs = vec![view(5, 1.0, &mut rng), view(10, 1.2, &mut rng)];
    Sample {
        inputs,
        input_cameras: vec![cam(-0.05), cam(0.05)],
        target_camera: cam(0.0),
        target_rgb: (0..3 * n).map(|_| rng.gen()).collect(),
        target_features: Some((0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()),
    }
}

/// `dL_total` with respect to encoder and query parameters on [`tiny_sample`],
/// with the feature term active. Up to `per_tensor` entries of each
/// parameter tensor are checked.
pub fn end_to_end(seed: u64, per_tensor: usize) -> Result<CheckReport, ModelError> {
    let mut report = CheckReport::new("end-to-end");
    let mut model = RepresentationModel::new(seed);
    // splats of a few pixels, well inside the scale clamp
    if let Some(Layer::Dense(d)) = model.query.heads[Head::Scale as usize].layers_mut().last_mut() {
        d.bias.data_mut().iter_mut().for_each(|b| *b = 0.3f64.ln());
    }
    let sample = tiny_sample(seed);
    let weights = LossWeights { warmup_iters: 0, ..LossWeights::default() };
    let cfg = RasterConfig::exact();
    let loss = |m: &RepresentationModel| -> Result<f64, ModelError> {
        Ok(m.loss_and_grads(&sample, &weights, 0, 1, &cfg)?.0.l_total)
    };
    let (_, grads) = model.loss_and_grads(&sample, &weights, 0, 1, &cfg)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    for (p, g) in grads.iter().enumerate() {
        let len = g.len();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            // the largest-magnitude entries carry the signal; zeros are trivially right
            let mut idx: Vec<usize> = (0..len).collect();
            idx.sort_by(|a, b| g.data()[*b].abs().total_cmp(&g.data()[*a].abs()));
            idx.truncate(per_tensor);
            idx
        };
        for i in picks {
            let orig = model.params()[p].data()[i];
            let h = STEP * orig.abs().max(1e-2);
            model.params_mut()[p].data_mut()[i] = orig + h;
            let fp = loss(&model)?;
            model.params_mut()[p].data_mut()[i] = orig - h;
            let fm = loss(&model)?;
            model.params_mut()[p].data_mut()[i] = orig;
            report.record(|| format!("{}[{i}]", names[p]), g.data()[i], (fp - fm) / (2.0 * h));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_has_a_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-9, 0.0) - 1e-3).abs() < 1e-12);
        assert_eq!(rel_err(2.0, 1.0), 0.5);
    }

    #[test]
    fn raster_backward_matches() {
        let r = raster(6, 1);
        assert!(r.passes(0.95, 1e-2), "{r:?}");
    }

    #[test]
    fn network_backward_matches() {
        let r = network(2).unwrap();
        assert!(r.passes(1.0, 1e-4), "{r:?}");
    }

    #[test]
    fn tiny_sample_yields_two_gaussians() {
        let s = tiny_sample(0);
        let m = RepresentationModel::new(0);
        let (cloud, _) = m.predict(&s, 1, &RasterConfig::exact()).unwrap();
        assert_eq!(cloud.len(), 2);
    }

    #[test]
    fn end_to_end_matches() {
        let r = end_to_end(3, 3).unwrap();
        eprintln!("{r:?}");
        assert!(r.max_rel <= 1e-2, "{r:?}");
    }
}
