//! The trainable representation: encoder plus query network, with a single
//! loss-and-gradient step through the rasterizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{MultiviewEncoder, MultiviewInput, LATENT_DIM};
use crate::geom::Camera;
use crate::losses::{self, ImageShape, LossWeights};
use crate::nnkit::{Checkpoint, NnError, Tensor};
use crate::qgfs::{assemble_cloud, unproject_rgbd, Head, QueryNetwork, QueryPoint, RgbdImage};
use crate::raster::{self, render_backward, GaussianCloud, RasterConfig, RasterError, RenderOutput, FEATURE_DIM};

const KIND: &str = "representation";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
}

/// One (input, input, target) training or evaluation sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub inputs: Vec<RgbdImage>,
    pub input_cameras: Vec<Camera>,
    pub target_camera: Camera,
    /// H×W×3 in [0,1].
    pub target_rgb: Vec<f64>,
    /// H×W×3 compact targets.
    pub target_features: Option<Vec<f64>>,
}

/// Scalar results of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub l_gs: f64,
    pub l_feat: f64,
    pub l_total: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Mean cosine over pixels with a nonzero target feature.
    pub feature_cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationModel {
    pub encoder: MultiviewEncoder,
    pub query: QueryNetwork,
}

impl RepresentationModel {
    pub fn new(seed: u64) -> Self {
        let encoder = MultiviewEncoder::new(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5155_4552_5953);
        Self { encoder, query: QueryNetwork::new(LATENT_DIM, &mut rng) }
    }

    pub fn arch_hash(&self) -> u32 {
        crc32fast::hash(format!("{}|{}", self.encoder.describe(), self.query.describe()).as_bytes())
    }

    fn points(sample: &Sample, stride: usize) -> Vec<QueryPoint> {
        sample
            .inputs
            .iter()
            .zip(&sample.input_cameras)
            .enumerate()
            .flat_map(|(i, (img, cam))| unproject_rgbd(img, cam, stride, i))
            .collect()
    }

    /// Predicted cloud and its render at the target camera.
    pub fn predict(
        &self,
        sample: &Sample,
        stride: usize,
        cfg: &RasterConfig,
    ) -> Result<(GaussianCloud, RenderOutput), ModelError> {
        let z = self.encoder.encode_views(&sample.inputs, &sample.input_cameras)?;
        let points = Self::points(sample, stride);
        let tape = self.query.forward(&z, &points)?;
        let cloud = assemble_cloud(&points, &tape.params);
        let (out, _) = raster::render(&cloud, &sample.target_camera, cfg);
        Ok((cloud, out))
    }

    /// Metrics of the prediction for `sample` without gradients.
    pub fn evaluate_sample(
        &self,
        sample: &Sample,
        weights: &LossWeights,
        stride: usize,
        cfg: &RasterConfig,
    ) -> Result<StepStats, ModelError> {
        let (_, out) = self.predict(sample, stride, cfg)?;
        stats(sample, &out, weights, u64::MAX)
    }

    /// Loss statistics and gradients in [`Self::params`] order.
    pub fn loss_and_grads(
        &self,
        sample: &Sample,
        weights: &LossWeights,
        iter: u64,
        stride: usize,
        cfg: &RasterConfig,
    ) -> Result<(StepStats, Vec<Tensor>), ModelError> {
        let input = MultiviewInput::new(sample.inputs.clone(), sample.input_cameras.clone())?;
        let (z, etape) = self.encoder.forward(&input)?;
        let points = Self::points(sample, stride);
        let qtape = self.query.forward(&z, &points)?;
        let cloud = assemble_cloud(&points, &qtape.params);
        let (out, state) = raster::render(&cloud, &sample.target_camera, cfg);
        let cam = &sample.target_camera;
        let shape = ImageShape::new(cam.width, cam.height, 3);
        let (l_gs, mut d_color, ssim) =
            losses::loss_gs_with_grad(&sample.target_rgb, &out.color, shape, weights.lambda)?;
        d_color.iter_mut().for_each(|g| *g *= weights.beta1);
        let mut d_feat = vec![0.0; out.feature.len()];
        let mut l_feat = f64::NAN;
        if let Some(t) = &sample.target_features {
            let (l, g, _) = losses::loss_feat_with_grad(t, &out.feature, FEATURE_DIM, weights.eta)?;
            l_feat = l;
            if weights.feature_active(iter) {
                d_feat = g.into_iter().map(|v| v * weights.beta2).collect();
            }
        }
        let l_total = losses::loss_total(l_gs, if l_feat.is_nan() { 0.0 } else { l_feat }, weights, iter);
        let cg = render_backward(&cloud, &state, &d_color, &d_feat)?;
        let (dz, qgrads) = self.query.backward(&qtape, &cg)?;
        let (_, mut grads) = self.encoder.backward(&etape, &dz)?;
        grads.extend(qgrads);
        let st = StepStats {
            l_gs,
            l_feat,
            l_total,
            psnr: losses::psnr(&sample.target_rgb, &out.color),
            ssim,
            feature_cosine: sample
                .target_features
                .as_ref()
                .and_then(|t| losses::mean_cosine_on_support(t, &out.feature, FEATURE_DIM)),
        };
        Ok((st, grads))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.query.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.query.params_mut());
        p
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut p = self.encoder.named_params();
        p.extend(self.query.named_params());
        p
    }

    /// Indices into [`Self::params`] of the feature head.
    pub fn feature_head_range(&self) -> std::ops::Range<usize> {
        let off = self.encoder.params().len();
        let r = self.query.head_param_range(Head::Feature);
        r.start + off..r.end + off
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        c.meta.insert("kind".into(), KIND.into());
        c.meta.insert("latent_dim".into(), LATENT_DIM.to_string());
        c.meta.insert("arch".into(), format!("{:08x}", self.arch_hash()));
        for (name, t) in self.named_params() {
            c.insert(name, t.clone());
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, NnError> {
        let mut m = Self::new(0);
        if c.meta.get("kind").map(String::as_str) != Some(KIND) {
            return Err(NnError::Checkpoint("not a representation checkpoint".into()));
        }
        if c.meta.get("latent_dim") != Some(&LATENT_DIM.to_string()) {
            return Err(NnError::Checkpoint(format!(
                "latent dimension {:?}, expected {LATENT_DIM}",
                c.meta.get("latent_dim")
            )));
        }
        let want = format!("{:08x}", m.arch_hash());
        if c.meta.get("arch") != Some(&want) {
            return Err(NnError::Checkpoint(format!("architecture hash {:?}, expected {want}", c.meta.get("arch"))));
        }
        let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        c.restore(names.into_iter().zip(m.params_mut()).collect())?;
        Ok(m)
    }
}

fn stats(sample: &Sample, out: &RenderOutput, weights: &LossWeights, iter: u64) -> Result<StepStats, ModelError> {
    let cam = &sample.target_camera;
    let shape = ImageShape::new(cam.width, cam.height, 3);
    let ssim = losses::ssim(&sample.target_rgb, &out.color, shape)?;
    let l_gs = weights.lambda * mean_abs(&sample.target_rgb, &out.color) + (1.0 - weights.lambda) * (1.0 - ssim);
    let (l_feat, cos) = match &sample.target_features {
        Some(t) => (
            losses::loss_feat(t, &out.feature, FEATURE_DIM, weights.eta)?,
            losses::mean_cosine_on_support(t, &out.feature, FEATURE_DIM),
        ),
        None => (f64::NAN, None),
    };
    Ok(StepStats {
        l_gs,
        l_feat,
        l_total: losses::loss_total(l_gs, if l_feat.is_nan() { 0.0 } else { l_feat }, weights, iter),
        psnr: losses::psnr(&sample.target_rgb, &out.color),
        ssim,
        feature_cosine: cos,
    })
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}
