//! Multiview encoder: two posed RGBD views to one scene latent.
//!
//! The views are stacked channel-wise (8 channels) and run through a
//! strided 4×4 convolution, a 3×3 feature block and two residual blocks,
//! then global-average-pooled. The two flattened projection matrices go
//! through a dense layer whose output is added to the pooled feature before
//! the final dense layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geom::Camera;
use crate::nnkit::{Activation, Conv2d, Dense, Layer, LayerStack, NnError, Tape, Tensor};
use crate::qgfs::RgbdImage;

pub const LATENT_DIM: usize = 128;
pub const INPUT_VIEWS: usize = 2;
const STEM: usize = 32;
const WIDTH: usize = 64;
const CAMERA_DIM: usize = 12 * INPUT_VIEWS;

#[derive(Debug, Clone, PartialEq)]
pub struct MultiviewInput {
    pub views: Vec<RgbdImage>,
    pub cameras: Vec<Camera>,
}

impl MultiviewInput {
    pub fn new(views: Vec<RgbdImage>, cameras: Vec<Camera>) -> Result<Self, NnError> {
        if views.len() != cameras.len() || views.is_empty() {
            return Err(NnError::Shape(format!("{} views with {} cameras", views.len(), cameras.len())));
        }
        let (w, h) = (views[0].width, views[0].height);
        if views.iter().any(|v| v.width != w || v.height != h || v.data.len() != w * h * 4) {
            return Err(NnError::Shape("input views differ in size".into()));
        }
        Ok(Self { views, cameras })
    }

    /// Channel-major `[4V, H, W]` stack.
    fn image_tensor(&self) -> Tensor {
        let (w, h) = (self.views[0].width, self.views[0].height);
        let mut data = Vec::with_capacity(4 * self.views.len() * w * h);
        for v in &self.views {
            for c in 0..4 {
                data.extend(v.data.iter().skip(c).step_by(4));
            }
        }
        Tensor::from_vec(&[4 * self.views.len(), h, w], data).expect("sizes checked")
    }

    fn camera_tensor(&self) -> Tensor {
        Tensor::row(self.cameras.iter().flat_map(camera_features).collect())
    }
}

/// `K' [R | t]` with the intrinsics divided by the image size.
pub fn camera_features(cam: &Camera) -> [f64; 12] {
    let p = cam.projection_matrix();
    let mut out = [0.0; 12];
    for r in 0..3 {
        let scale = match r {
            0 => 1.0 / cam.width as f64,
            1 => 1.0 / cam.height as f64,
            _ => 1.0,
        };
        for c in 0..4 {
            out[r * 4 + c] = p[(r, c)] * scale;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiviewEncoder {
    pub trunk: LayerStack,
    pub camera: LayerStack,
    pub head: LayerStack,
}

#[derive(Debug, Clone)]
pub struct EncoderTape {
    trunk: Tape,
    camera: Tape,
    head: Tape,
}

fn residual(rng: &mut ChaCha8Rng) -> Layer {
    Layer::Residual(
        LayerStack::new(vec![
            Layer::Conv(Conv2d::same(WIDTH, WIDTH, 3, rng)),
            Layer::Act(Activation::Relu),
            Layer::Conv(Conv2d::same(WIDTH, WIDTH, 3, rng)),
        ])
        .expect("square block"),
    )
}

impl MultiviewEncoder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = LayerStack::new(vec![
            Layer::Conv(Conv2d::new(4 * INPUT_VIEWS, STEM, 4, 2, 1, &mut rng)),
            Layer::Act(Activation::Relu),
            Layer::Conv(Conv2d::same(STEM, WIDTH, 3, &mut rng)),
            Layer::Act(Activation::Relu),
            residual(&mut rng),
            Layer::Act(Activation::Relu),
            residual(&mut rng),
            Layer::Act(Activation::Relu),
            Layer::GlobalAvgPool,
        ])
        .expect("channel widths chain");
        let camera =
            LayerStack::new(vec![Layer::Dense(Dense::new(CAMERA_DIM, WIDTH, &mut rng))]).expect("single layer");
        let head =
            LayerStack::new(vec![Layer::Act(Activation::Relu), Layer::Dense(Dense::new(WIDTH, LATENT_DIM, &mut rng))])
                .expect("single layer");
        Self { trunk, camera, head }
    }

    pub fn describe(&self) -> String {
        format!("trunk[{}]camera[{}]head[{}]", self.trunk.describe(), self.camera.describe(), self.head.describe())
    }

    fn check(input: &MultiviewInput) -> Result<(), NnError> {
        if input.views.len() != INPUT_VIEWS {
            return Err(NnError::Shape(format!("encoder takes {INPUT_VIEWS} views, got {}", input.views.len())));
        }
        Ok(())
    }

    pub fn forward(&self, input: &MultiviewInput) -> Result<(Vec<f64>, EncoderTape), NnError> {
        Self::check(input)?;
        self.forward_tensors(&input.image_tensor(), &input.camera_tensor())
    }

    fn forward_tensors(&self, img: &Tensor, cams: &Tensor) -> Result<(Vec<f64>, EncoderTape), NnError> {
        let (mut pooled, trunk) = self.trunk.forward(img)?;
        let (c, camera) = self.camera.forward(cams)?;
        pooled.add_assign(&c);
        let (z, head) = self.head.forward(&pooled)?;
        Ok((z.into_data(), EncoderTape { trunk, camera, head }))
    }

    pub fn encode_multiview(&self, input: &MultiviewInput) -> Result<Vec<f64>, NnError> {
        Ok(self.forward(input)?.0)
    }

    /// Returns `dL/d(input image stack)` (channel-major `[8, H, W]`) and
    /// parameter gradients in [`Self::params`] order.
    pub fn backward(&self, tape: &EncoderTape, dz: &[f64]) -> Result<(Tensor, Vec<Tensor>), NnError> {
        let (dsum, head_g) = self.head.backward(&tape.head, &Tensor::row(dz.to_vec()))?;
        let (_, cam_g) = self.camera.backward(&tape.camera, &dsum)?;
        let (dimg, mut grads) = self.trunk.backward(&tape.trunk, &dsum)?;
        grads.extend(cam_g);
        grads.extend(head_g);
        Ok((dimg, grads))
    }

    /// Latent for an arbitrary number of views: a single view is paired with
    /// an all-zero view and camera, more than two average the latents of
    /// consecutive pairs.
    pub fn encode_views(&self, views: &[RgbdImage], cameras: &[Camera]) -> Result<Vec<f64>, NnError> {
        match views.len() {
            0 => Err(NnError::Shape("no input views".into())),
            1 => {
                let input = MultiviewInput::new(vec![views[0].clone()], vec![cameras[0].clone()])?;
                let mut img = input.image_tensor().into_data();
                img.resize(img.len() * 2, 0.0);
                let (w, h) = (views[0].width, views[0].height);
                let img = Tensor::from_vec(&[4 * INPUT_VIEWS, h, w], img)?;
                let mut cams = camera_features(&cameras[0]).to_vec();
                cams.resize(CAMERA_DIM, 0.0);
                Ok(self.forward_tensors(&img, &Tensor::row(cams))?.0)
            }
            2 => self.encode_multiview(&MultiviewInput::new(views.to_vec(), cameras.to_vec())?),
            n => {
                let mut acc = vec![0.0; LATENT_DIM];
                for i in 0..n - 1 {
                    let z = self.encode_multiview(&MultiviewInput::new(
                        views[i..i + 2].to_vec(),
                        cameras[i..i + 2].to_vec(),
                    )?)?;
                    acc.iter_mut().zip(z).for_each(|(a, v)| *a += v);
                }
                Ok(acc.into_iter().map(|v| v / (n - 1) as f64).collect())
            }
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.trunk.params();
        p.extend(self.camera.params());
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.trunk.params_mut();
        p.extend(self.camera.params_mut());
        p.extend(self.head.params_mut());
        p
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut p = self.trunk.named_params("encoder.trunk");
        p.extend(self.camera.named_params("encoder.camera"));
        p.extend(self.head.named_params("encoder.head"));
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::Rng;

    fn random_input(seed: u64, size: usize) -> MultiviewInput {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let views = (0..2)
            .map(|_| RgbdImage {
                width: size,
                height: size,
                data: (0..size * size * 4).map(|i| if i % 4 == 3 { r.gen_range(0.5..2.5) } else { r.gen() }).collect(),
            })
            .collect();
        let f = size as f64;
        let cameras = [Vector3::new(1.5, 0.0, 0.8), Vector3::new(0.0, 1.5, 0.8)]
            .into_iter()
            .map(|eye| {
                Camera::look_at(eye, Vector3::zeros(), Vector3::z(), [f, f, f / 2.0, f / 2.0], size, size).unwrap()
            })
            .collect();
        MultiviewInput::new(views, cameras).unwrap()
    }

    #[test]
    fn latent_shape_and_determinism() {
        let enc = MultiviewEncoder::new(1);
        let input = random_input(2, 16);
        let z = enc.encode_multiview(&input).unwrap();
        assert_eq!(z.len(), LATENT_DIM);
        assert_eq!(z, enc.encode_multiview(&input).unwrap());
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn view_order_matters() {
        let enc = MultiviewEncoder::new(3);
        let input = random_input(4, 16);
        let mut swapped = input.clone();
        swapped.views.swap(0, 1);
        swapped.cameras.swap(0, 1);
        assert_ne!(enc.encode_multiview(&input).unwrap(), enc.encode_multiview(&swapped).unwrap());
    }

    #[test]
    fn mismatched_views_are_rejected() {
        let input = random_input(5, 8);
        assert!(
            MultiviewInput::new(vec![input.views[0].clone(), RgbdImage::zeros(8, 9)], input.cameras.clone()).is_err()
        );
        let one = MultiviewInput::new(vec![input.views[0].clone()], vec![input.cameras[0].clone()]).unwrap();
        assert!(MultiviewEncoder::new(0).encode_multiview(&one).is_err());
    }

    #[test]
    fn pixel_gradient_matches_finite_differences() {
        let enc = MultiviewEncoder::new(6);
        let input = random_input(7, 8);
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let probe: Vec<f64> = (0..LATENT_DIM).map(|_| r.gen_range(-1.0..1.0)).collect();
        let f = |inp: &MultiviewInput| -> f64 {
            enc.encode_multiview(inp).unwrap().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = enc.forward(&input).unwrap();
        let (dimg, grads) = enc.backward(&tape, &probe).unwrap();
        assert_eq!(grads.len(), enc.params().len());
        let h = 1e-6;
        // (view, channel, y, x)
        for (v, c, y, x) in [(0, 0, 3, 4), (0, 3, 1, 1), (1, 2, 6, 2), (1, 3, 7, 7)] {
            let idx = (y * 8 + x) * 4 + c;
            let mut p = input.clone();
            p.views[v].data[idx] += h;
            let mut m = input.clone();
            m.views[v].data[idx] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let a = dimg.data()[(v * 4 + c) * 64 + y * 8 + x];
            assert!((fd - a).abs() <= 1e-3 * fd.abs().max(a.abs()).max(1e-6), "{fd} vs {a}");
        }
    }

    #[test]
    fn variable_view_counts() {
        let enc = MultiviewEncoder::new(9);
        let input = random_input(10, 8);
        let two = enc.encode_views(&input.views, &input.cameras).unwrap();
        assert_eq!(two, enc.encode_multiview(&input).unwrap());
        assert_eq!(enc.encode_views(&input.views[..1], &input.cameras[..1]).unwrap().len(), LATENT_DIM);
        let mut views = input.views.clone();
        views.push(input.views[0].clone());
        let mut cams = input.cameras.clone();
        cams.push(input.cameras[0].clone());
        let three = enc.encode_views(&views, &cams).unwrap();
        let mut swapped = input.clone();
        swapped.views.swap(0, 1);
        swapped.cameras.swap(0, 1);
        let other = enc.encode_multiview(&swapped).unwrap();
        for k in 0..LATENT_DIM {
            assert!((three[k] - (two[k] + other[k]) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn camera_features_normalize_intrinsics() {
        let c = Camera::identity_pose(64.0, 64.0, 32.0, 32.0, 64, 64);
        let f = camera_features(&c);
        assert_eq!(f, [1.0, 0.0, 0.5, 0.0, 0.0, 1.0, 0.5, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }
}
