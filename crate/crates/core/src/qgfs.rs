//! Surface-point queries: RGBD unprojection, positional encoding, the query
//! decoder and the per-point Gaussian parameter heads.

use nalgebra::Vector3;
use rand::Rng;

use crate::geom::{normalize_vjp, unproject_pixel, Camera, Quaternion};
use crate::nnkit::{sigmoid, Activation, LayerStack, NnError, Tape, Tensor};
use crate::raster::{pixel_center, CloudGrads, Gaussian, GaussianCloud, FEATURE_DIM};

pub const PE_FREQS: usize = 6;
pub const PE_DIM: usize = 2 * PE_FREQS * 3;
pub const QUERY_DIM: usize = PE_DIM + 6;
pub const LOCAL_DIM: usize = 64;
const HEAD_HIDDEN: usize = 32;
pub const SCALE_MIN: f64 = 1e-4;
pub const SCALE_MAX: f64 = 0.5;

/// H×W RGBD image, pixel-interleaved `[r, g, b, depth]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbdImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 4] }
    }

    /// Builds from interleaved RGB and a depth plane.
    pub fn from_parts(width: usize, height: usize, rgb: &[f64], depth: &[f64]) -> Self {
        assert_eq!(rgb.len(), width * height * 3);
        assert_eq!(depth.len(), width * height);
        let mut data = Vec::with_capacity(width * height * 4);
        for i in 0..width * height {
            data.extend_from_slice(&rgb[3 * i..3 * i + 3]);
            data.push(depth[i]);
        }
        Self { width, height, data }
    }

    pub fn rgb(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 4;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn depth(&self, x: usize, y: usize) -> f64 {
        self.data[(y * self.width + x) * 4 + 3]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryPoint {
    pub position: Vector3<f64>,
    pub color: [f64; 3],
    pub view: usize,
    pub pixel: (usize, usize),
}

/// One point per pixel with positive depth on the `stride` grid, sampled at pixel centers.
pub fn unproject_rgbd(img: &RgbdImage, cam: &Camera, stride: usize, view: usize) -> Vec<QueryPoint> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for y in (0..img.height).step_by(stride) {
        for x in (0..img.width).step_by(stride) {
            let d = img.depth(x, y);
            if d > 0.0 && d.is_finite() {
                out.push(QueryPoint {
                    position: unproject_pixel(pixel_center(x), pixel_center(y), d, cam),
                    color: img.rgb(x, y),
                    view,
                    pixel: (x, y),
                });
            }
        }
    }
    out
}

/// Per axis and frequency `k`: `(sin(2ᵏπp), cos(2ᵏπp))`, axis-major.
pub fn positional_encode(x: &Vector3<f64>) -> [f64; PE_DIM] {
    let mut out = [0.0; PE_DIM];
    for axis in 0..3 {
        for k in 0..PE_FREQS {
            let a = (1u32 << k) as f64 * std::f64::consts::PI * x[axis];
            out[axis * 2 * PE_FREQS + 2 * k] = a.sin();
            out[axis * 2 * PE_FREQS + 2 * k + 1] = a.cos();
        }
    }
    out
}

/// `[γ(x) ‖ x ‖ c]`.
pub fn encode_query(p: &QueryPoint) -> [f64; QUERY_DIM] {
    let mut out = [0.0; QUERY_DIM];
    out[..PE_DIM].copy_from_slice(&positional_encode(&p.position));
    out[PE_DIM..PE_DIM + 3].copy_from_slice(p.position.as_slice());
    out[PE_DIM + 3..].copy_from_slice(&p.color);
    out
}

/// Head pre-activations for one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawParams {
    pub rotation: [f64; 4],
    pub scale: [f64; 3],
    pub opacity: f64,
    pub feature: [f64; FEATURE_DIM],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianParams {
    pub rotation: Quaternion,
    pub scale: [f64; 3],
    pub opacity: f64,
    pub feature: [f64; FEATURE_DIM],
}

/// Normalized rotation (identity for a zero vector), clamped `exp` scale,
/// sigmoid opacity and tanh feature.
pub fn regress_gaussian_params(raw: &RawParams) -> GaussianParams {
    let q = Quaternion::from_array(raw.rotation);
    GaussianParams {
        rotation: q.normalized().unwrap_or(Quaternion::IDENTITY),
        scale: raw.scale.map(|v| v.exp().clamp(SCALE_MIN, SCALE_MAX)),
        opacity: sigmoid(raw.opacity),
        feature: raw.feature.map(f64::tanh),
    }
}

/// Pulls gradients on the activated parameters back to the pre-activations.
/// A zero-norm rotation passes no gradient; a clamped scale component passes
/// only gradient that would move it back inside the clamp range.
pub fn regress_backward(
    raw: &RawParams,
    out: &GaussianParams,
    d_rotation: [f64; 4],
    d_scale: [f64; 3],
    d_opacity: f64,
    d_feature: [f64; FEATURE_DIM],
) -> RawParams {
    let n = Quaternion::from_array(raw.rotation).norm();
    let rotation = if n > 0.0 { normalize_vjp(out.rotation.to_array(), n, d_rotation) } else { [0.0; 4] };
    let mut scale = [0.0; 3];
    for k in 0..3 {
        let e = raw.scale[k].exp();
        let g = d_scale[k] * e.clamp(SCALE_MIN, SCALE_MAX);
        // a clamped component only passes gradient that points back into range
        let inward = (e > SCALE_MAX && g > 0.0) || (e < SCALE_MIN && g < 0.0);
        if (SCALE_MIN..=SCALE_MAX).contains(&e) || inward {
            scale[k] = g;
        }
    }
    let mut feature = [0.0; FEATURE_DIM];
    for k in 0..FEATURE_DIM {
        feature[k] = d_feature[k] * (1.0 - out.feature[k] * out.feature[k]);
    }
    RawParams { rotation, scale, opacity: d_opacity * out.opacity * (1.0 - out.opacity), feature }
}

/// Cloud with means and colors copied from the points.
pub fn assemble_cloud(points: &[QueryPoint], params: &[GaussianParams]) -> GaussianCloud {
    assert_eq!(points.len(), params.len(), "one parameter tuple per point");
    GaussianCloud::new(
        points
            .iter()
            .zip(params)
            .map(|(p, g)| Gaussian {
                mean: p.position,
                rotation: g.rotation,
                scale: g.scale,
                opacity: g.opacity,
                color: p.color,
                feature: g.feature,
            })
            .collect(),
    )
}

/// Index of each head in [`QueryNetwork::heads`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Rotation = 0,
    Scale = 1,
    Opacity = 2,
    Feature = 3,
}

const HEAD_OUT: [usize; 4] = [4, 3, 1, FEATURE_DIM];
const HEAD_NAMES: [&str; 4] = ["rotation", "scale", "opacity", "feature"];

/// Query decoder `Q_d` plus the four parameter heads.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryNetwork {
    pub latent_dim: usize,
    pub decoder: LayerStack,
    pub heads: [LayerStack; 4],
}

/// Saved state from [`QueryNetwork::forward`].
#[derive(Debug, Clone)]
pub struct QueryTape {
    decoder: Tape,
    heads: Vec<Tape>,
    raw: Vec<RawParams>,
    pub params: Vec<GaussianParams>,
}

impl QueryNetwork {
    pub fn new(latent_dim: usize, rng: &mut impl Rng) -> Self {
        let decoder = LayerStack::mlp(
            &[QUERY_DIM + latent_dim, LOCAL_DIM, LOCAL_DIM],
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        let heads = HEAD_OUT
            .map(|k| LayerStack::mlp(&[LOCAL_DIM, HEAD_HIDDEN, k], Activation::Relu, Activation::Identity, rng));
        Self { latent_dim, decoder, heads }
    }

    pub fn describe(&self) -> String {
        let mut s = format!("qd[{}]", self.decoder.describe());
        for (n, h) in HEAD_NAMES.iter().zip(&self.heads) {
            s.push_str(&format!("{n}[{}]", h.describe()));
        }
        s
    }

    fn input_rows(&self, z: &[f64], points: &[QueryPoint]) -> Result<Tensor, NnError> {
        if z.len() != self.latent_dim {
            return Err(NnError::Shape(format!("latent of {} values, decoder expects {}", z.len(), self.latent_dim)));
        }
        let width = QUERY_DIM + self.latent_dim;
        let mut data = Vec::with_capacity(points.len() * width);
        for p in points {
            data.extend_from_slice(&encode_query(p));
            data.extend_from_slice(z);
        }
        Tensor::from_vec(&[points.len(), width], data)
    }

    /// `f_local = Q_d(eq ⊕ z)` for a single query.
    pub fn query_local_feature(&self, z: &[f64], eq: &[f64; QUERY_DIM]) -> Result<Vec<f64>, NnError> {
        if z.len() != self.latent_dim {
            return Err(NnError::Shape(format!("latent of {} values, decoder expects {}", z.len(), self.latent_dim)));
        }
        let mut row = eq.to_vec();
        row.extend_from_slice(z);
        Ok(self.decoder.infer(&Tensor::row(row))?.into_data())
    }

    pub fn forward(&self, z: &[f64], points: &[QueryPoint]) -> Result<QueryTape, NnError> {
        let x = self.input_rows(z, points)?;
        let (local, decoder) = self.decoder.forward(&x)?;
        let mut outs = Vec::with_capacity(4);
        let mut heads = Vec::with_capacity(4);
        for h in &self.heads {
            let (y, t) = h.forward(&local)?;
            outs.push(y);
            heads.push(t);
        }
        let raw: Vec<RawParams> = (0..points.len())
            .map(|i| {
                let r = |k: usize, j: usize| outs[k].data()[i * HEAD_OUT[k] + j];
                RawParams {
                    rotation: [r(0, 0), r(0, 1), r(0, 2), r(0, 3)],
                    scale: [r(1, 0), r(1, 1), r(1, 2)],
                    opacity: r(2, 0),
                    feature: std::array::from_fn(|j| r(3, j)),
                }
            })
            .collect();
        let params = raw.iter().map(regress_gaussian_params).collect();
        Ok(QueryTape { decoder, heads, raw, params })
    }

    /// Returns `dL/dz` and parameter gradients in [`Self::params`] order.
    pub fn backward(&self, tape: &QueryTape, grads: &CloudGrads) -> Result<(Vec<f64>, Vec<Tensor>), NnError> {
        let n = tape.raw.len();
        if grads.opacity.len() != n {
            return Err(NnError::Shape(format!("{} gradient rows for {n} points", grads.opacity.len())));
        }
        let mut d_heads: Vec<Vec<f64>> = HEAD_OUT.iter().map(|k| Vec::with_capacity(n * k)).collect();
        for i in 0..n {
            let d = regress_backward(
                &tape.raw[i],
                &tape.params[i],
                grads.rotation[i],
                grads.scale[i],
                grads.opacity[i],
                grads.feature[i],
            );
            d_heads[0].extend_from_slice(&d.rotation);
            d_heads[1].extend_from_slice(&d.scale);
            d_heads[2].push(d.opacity);
            d_heads[3].extend_from_slice(&d.feature);
        }
        let mut d_local = Tensor::zeros(&[n, LOCAL_DIM]);
        let mut head_grads = Vec::new();
        for (k, (h, t)) in self.heads.iter().zip(&tape.heads).enumerate() {
            let dy = Tensor::from_vec(&[n, HEAD_OUT[k]], std::mem::take(&mut d_heads[k]))?;
            let (dx, g) = h.backward(t, &dy)?;
            d_local.add_assign(&dx);
            head_grads.push(g);
        }
        let (dx, mut grads_out) = self.decoder.backward(&tape.decoder, &d_local)?;
        let width = QUERY_DIM + self.latent_dim;
        let mut dz = vec![0.0; self.latent_dim];
        for row in dx.data().chunks(width) {
            for (a, v) in dz.iter_mut().zip(&row[QUERY_DIM..]) {
                *a += v;
            }
        }
        for g in head_grads {
            grads_out.extend(g);
        }
        Ok((dz, grads_out))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.decoder.params();
        for h in &self.heads {
            p.extend(h.params());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.decoder.params_mut();
        for h in &mut self.heads {
            p.extend(h.params_mut());
        }
        p
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut p = self.decoder.named_params("query.decoder");
        for (n, h) in HEAD_NAMES.iter().zip(&self.heads) {
            p.extend(h.named_params(&format!("query.head.{n}")));
        }
        p
    }

    /// Range of [`Self::params`] indices belonging to `head`.
    pub fn head_param_range(&self, head: Head) -> std::ops::Range<usize> {
        let mut start = self.decoder.params().len();
        for h in &self.heads[..head as usize] {
            start += h.params().len();
        }
        start..start + self.heads[head as usize].params().len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::project_point;
    use crate::nnkit::Layer;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> Camera {
        Camera::look_at(Vector3::new(1.2, -0.8, 0.9), Vector3::zeros(), Vector3::z(), [60.0, 62.0, 16.0, 15.0], 32, 30)
            .unwrap()
    }

    fn random_rgbd(seed: u64, w: usize, h: usize) -> RgbdImage {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h)
            .flat_map(|_| {
                let d = if r.gen_bool(0.2) { 0.0 } else { r.gen_range(0.5..3.0) };
                [r.gen(), r.gen(), r.gen(), d]
            })
            .collect();
        RgbdImage { width: w, height: h, data }
    }

    #[test]
    fn unprojection_examples() {
        let c = Camera::identity_pose(50.0, 50.0, 20.0, 10.0, 40, 20);
        assert_eq!(unproject_pixel(20.0, 10.0, 2.5, &c), Vector3::new(0.0, 0.0, 2.5));
        assert_eq!(unproject_pixel(70.0, 10.0, 1.0, &c), Vector3::new(1.0, 0.0, 1.0));
    }

    #[test]
    fn unprojected_points_project_back() {
        let img = random_rgbd(1, 32, 30);
        let c = cam();
        let pts = unproject_rgbd(&img, &c, 1, 0);
        assert_eq!(pts.len(), img.data.chunks(4).filter(|p| p[3] > 0.0).count());
        for p in &pts {
            let back = project_point(&p.position, &c).unwrap();
            assert!((back.u - pixel_center(p.pixel.0)).abs() < 1e-6);
            assert!((back.v - pixel_center(p.pixel.1)).abs() < 1e-6);
            assert!((back.depth - img.depth(p.pixel.0, p.pixel.1)).abs() < 1e-6);
            assert_eq!(p.color, img.rgb(p.pixel.0, p.pixel.1));
        }
    }

    #[test]
    fn stride_two_is_a_subset_of_stride_one() {
        let img = random_rgbd(2, 32, 30);
        let all = unproject_rgbd(&img, &cam(), 1, 3);
        let sub = unproject_rgbd(&img, &cam(), 2, 3);
        assert!(sub.len() < all.len());
        assert!(sub.iter().all(|p| all.contains(p)));
    }

    #[test]
    fn positional_encoding_examples() {
        let z = positional_encode(&Vector3::zeros());
        for (i, v) in z.iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        let one = positional_encode(&Vector3::new(1.0, 0.0, 0.0));
        assert!(one[0].abs() < 1e-15);
        assert_eq!(one[1], -1.0);
        let p = QueryPoint { position: Vector3::new(0.1, 0.2, 0.3), color: [0.4, 0.5, 0.6], view: 0, pixel: (0, 0) };
        let q = encode_query(&p);
        assert_eq!(q.len(), 42);
        assert_eq!(&q[36..], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
    }

    #[test]
    fn regression_examples() {
        let raw = RawParams { rotation: [1.0, 0.0, 0.0, 0.0], scale: [0.0; 3], opacity: 0.0, feature: [0.0; 3] };
        let p = regress_gaussian_params(&raw);
        assert_eq!(p.rotation, Quaternion::IDENTITY);
        assert_eq!(p.scale, [0.5; 3]);
        assert_eq!(p.opacity, 0.5);
        assert_eq!(p.feature, [0.0; 3]);
        let zero = RawParams { rotation: [0.0; 4], ..raw };
        assert_eq!(regress_gaussian_params(&zero).rotation, Quaternion::IDENTITY);
        let tiny = RawParams { scale: [-20.0, (0.01f64).ln(), 3.0], ..raw };
        let s = regress_gaussian_params(&tiny).scale;
        assert_eq!(s[0], SCALE_MIN);
        assert!((s[1] - 0.01).abs() < 1e-15);
        assert_eq!(s[2], SCALE_MAX);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = QueryNetwork::new(8, &mut rng);
        for l in net.decoder.layers_mut() {
            if let Layer::Dense(d) = l {
                d.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
                d.bias.data_mut().iter_mut().for_each(|v| *v = 0.25);
            }
        }
        let p = QueryPoint { position: Vector3::new(0.3, -0.1, 0.7), color: [0.2; 3], view: 0, pixel: (0, 0) };
        let f = net.query_local_feature(&[0.5; 8], &encode_query(&p)).unwrap();
        assert_eq!(f, vec![0.25; LOCAL_DIM]);
        assert!(net.query_local_feature(&[0.5; 7], &encode_query(&p)).is_err());
    }

    fn scalar_probe(net: &QueryNetwork, z: &[f64], pts: &[QueryPoint], w: &CloudGrads) -> f64 {
        let t = net.forward(z, pts).unwrap();
        let mut s = 0.0;
        for (i, p) in t.params.iter().enumerate() {
            let q = p.rotation.to_array();
            s += (0..4).map(|k| w.rotation[i][k] * q[k]).sum::<f64>();
            s += (0..3).map(|k| w.scale[i][k] * p.scale[k]).sum::<f64>();
            s += w.opacity[i] * p.opacity;
            s += (0..3).map(|k| w.feature[i][k] * p.feature[k]).sum::<f64>();
        }
        s
    }

    #[test]
    fn latent_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = QueryNetwork::new(6, &mut rng);
        // keep scales off the clamp, where the gradient is one-sided
        if let Some(Layer::Dense(d)) = net.heads[Head::Scale as usize].layers_mut().last_mut() {
            d.bias.data_mut().iter_mut().for_each(|b| *b = 0.05f64.ln());
        }
        let img = random_rgbd(5, 4, 4);
        let pts = unproject_rgbd(&img, &cam(), 1, 0);
        let z: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut w = CloudGrads::zeros(pts.len());
        for i in 0..pts.len() {
            w.rotation[i] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            w.scale[i] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            w.opacity[i] = rng.gen_range(-1.0..1.0);
            w.feature[i] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        }
        let tape = net.forward(&z, &pts).unwrap();
        let (dz, grads) = net.backward(&tape, &w).unwrap();
        assert_eq!(grads.len(), net.params().len());
        let h = 1e-6;
        for k in 0..6 {
            let mut zp = z.clone();
            zp[k] += h;
            let mut zm = z.clone();
            zm[k] -= h;
            let fd = (scalar_probe(&net, &zp, &pts, &w) - scalar_probe(&net, &zm, &pts, &w)) / (2.0 * h);
            let rel = (fd - dz[k]).abs() / fd.abs().max(dz[k].abs()).max(1e-6);
            assert!(rel < 1e-3, "{k}: {fd} vs {}", dz[k]);
        }
        // one parameter per head through the parameter path
        for head in [Head::Rotation, Head::Scale, Head::Opacity, Head::Feature] {
            let idx = net.head_param_range(head).start;
            let mut np = net.clone();
            np.params_mut()[idx].data_mut()[1] += h;
            let mut nm = net.clone();
            nm.params_mut()[idx].data_mut()[1] -= h;
            let fd = (scalar_probe(&np, &z, &pts, &w) - scalar_probe(&nm, &z, &pts, &w)) / (2.0 * h);
            let a = grads[idx].data()[1];
            assert!((fd - a).abs() <= 1e-3 * fd.abs().max(a.abs()).max(1e-6), "{head:?}: {fd} vs {a}");
        }
    }

    #[test]
    fn latent_only_changes_trainable_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = QueryNetwork::new(4, &mut rng);
        let pts = unproject_rgbd(&random_rgbd(7, 6, 6), &cam(), 1, 1);
        let a = net.forward(&[0.1, 0.2, 0.3, 0.4], &pts).unwrap().params;
        let b = net.forward(&[-0.5, 0.2, 0.9, 0.0], &pts).unwrap().params;
        assert_ne!(a, b);
        let ca = assemble_cloud(&pts, &a);
        let cb = assemble_cloud(&pts, &b);
        assert_eq!(ca.len(), pts.len());
        for ((ga, gb), p) in ca.gaussians.iter().zip(&cb.gaussians).zip(&pts) {
            assert_eq!(ga.mean, p.position);
            assert_eq!(gb.mean, p.position);
            assert_eq!(ga.color, p.color);
            assert_eq!(gb.color, p.color);
        }
    }

    #[test]
    fn clamped_scale_passes_only_inward_gradient() {
        let raw =
            RawParams { rotation: [1.0, 0.0, 0.0, 0.0], scale: [-12.0, 0.0, -3.0], opacity: 0.0, feature: [0.0; 3] };
        let out = regress_gaussian_params(&raw);
        assert_eq!(out.scale, [SCALE_MIN, SCALE_MAX, (-3.0f64).exp()]);
        let grow = regress_backward(&raw, &out, [0.0; 4], [-1.0; 3], 0.0, [0.0; 3]).scale;
        assert_eq!(grow[0], -SCALE_MIN);
        assert_eq!(grow[1], 0.0);
        assert!((grow[2] + (-3.0f64).exp()).abs() < 1e-15);
        let shrink = regress_backward(&raw, &out, [0.0; 4], [1.0; 3], 0.0, [0.0; 3]).scale;
        assert_eq!(shrink[0], 0.0);
        assert_eq!(shrink[1], SCALE_MAX);
    }

    proptest! {
        #[test]
        fn regress_backward_matches_finite_differences(
            r in prop::array::uniform4(-2.0f64..2.0),
            s in prop::array::uniform3(-6.0f64..-1.0),
            o in -3.0f64..3.0,
            f in prop::array::uniform3(-2.0f64..2.0),
            g in prop::array::uniform11(-1.0f64..1.0),
        ) {
            prop_assume!(r.iter().map(|v| v * v).sum::<f64>() > 0.1);
            let raw = RawParams { rotation: r, scale: s, opacity: o, feature: f };
            let probe = |raw: &RawParams| {
                let p = regress_gaussian_params(raw);
                let q = p.rotation.to_array();
                (0..4).map(|k| g[k] * q[k]).sum::<f64>()
                    + (0..3).map(|k| g[4 + k] * p.scale[k]).sum::<f64>()
                    + g[7] * p.opacity
                    + (0..3).map(|k| g[8 + k] * p.feature[k]).sum::<f64>()
            };
            let out = regress_gaussian_params(&raw);
            let d = regress_backward(&raw, &out, [g[0], g[1], g[2], g[3]], [g[4], g[5], g[6]], g[7], [g[8], g[9], g[10]]);
            let flat = |p: &RawParams| [p.rotation.to_vec(), p.scale.to_vec(), vec![p.opacity], p.feature.to_vec()].concat();
            let analytic = flat(&d);
            let base = flat(&raw);
            let h = 1e-6;
            for k in 0..11 {
                let mut plus = base.clone();
                plus[k] += h;
                let mut minus = base.clone();
                minus[k] -= h;
                let un = |v: &[f64]| RawParams {
                    rotation: [v[0], v[1], v[2], v[3]],
                    scale: [v[4], v[5], v[6]],
                    opacity: v[7],
                    feature: [v[8], v[9], v[10]],
                };
                let fd = (probe(&un(&plus)) - probe(&un(&minus))) / (2.0 * h);
                prop_assert!((fd - analytic[k]).abs() < 1e-6, "{} {} {}", k, fd, analytic[k]);
            }
        }
    }
}
