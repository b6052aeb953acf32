//! Autoencoder pretraining, representation training, evaluation and the
//! run configuration.

use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hse::{self, Autoencoder, SEMANTIC_DIM};
use crate::losses::LossWeights;
use crate::model::{ModelError, RepresentationModel, Sample, StepStats};
use crate::nnkit::{Adam, Checkpoint, NnError, Tensor};
use crate::raster::RasterConfig;
use crate::scenes::{Dataset, SceneError, TRIPLES};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("training diverged: non-finite loss or gradient at step {step}")]
    Diverged { step: u64 },
    #[error(transparent)]
    Nn(NnError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Hse(#[from] hse::HseError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Diverged { step } => TrainError::Diverged { step },
            other => TrainError::Nn(other),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Upper bound on the number of training vectors drawn from the dataset.
    pub corpus_cap: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self { lr: 5e-4, epochs: 200, batch_size: 32, corpus_cap: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepConfig {
    /// Encoder learning rate.
    pub lr: f64,
    /// Query-network learning rate; `None` uses `lr`.
    pub query_lr: Option<f64>,
    pub epochs: usize,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<u64>,
}

impl Default for RepConfig {
    fn default() -> Self {
        Self { lr: 5e-5, query_lr: Some(1e-3), epochs: 10, max_steps: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Numeric profile; only `"f64"` is implemented.
    pub profile: String,
    /// Pixel stride for surface-point queries.
    pub stride: usize,
    /// Samples accumulated per optimizer step.
    pub batch_size: usize,
    /// Writes zero wall-clock times so reruns produce identical files.
    pub deterministic: bool,
    /// Worker cap; 0 picks the default.
    pub threads: usize,
    /// Episodes at the end of the dataset kept out of training.
    pub holdout_episodes: usize,
    pub weights: LossWeights,
    pub autoencoder: AeConfig,
    pub representation: RepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/desk.qgfsds"),
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            profile: "f64".into(),
            stride: 2,
            batch_size: 1,
            deterministic: true,
            threads: 0,
            holdout_episodes: 8,
            weights: LossWeights::default(),
            autoencoder: AeConfig::default(),
            representation: RepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    /// `base` with every key present in the TOML `text` taking precedence.
    pub fn layered(base: &RunConfig, text: &str) -> Result<Self, TrainError> {
        fn merge(dst: &mut toml::Value, src: toml::Value) {
            match (dst, src) {
                (toml::Value::Table(d), toml::Value::Table(s)) => {
                    for (k, v) in s {
                        match d.get_mut(&k) {
                            Some(slot) => merge(slot, v),
                            None => {
                                d.insert(k, v);
                            }
                        }
                    }
                }
                (slot, v) => *slot = v,
            }
        }
        let cfg_err = |e: &dyn std::fmt::Display| TrainError::Config(e.to_string());
        let mut value = toml::Value::try_from(base).map_err(|e| cfg_err(&e))?;
        let file: toml::Value = toml::from_str(text).map_err(|e| cfg_err(&e))?;
        merge(&mut value, file);
        let cfg: Self = value.try_into().map_err(|e| cfg_err(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.profile != "f64" {
            return bad(format!("numeric profile {:?} is not available (only \"f64\")", self.profile));
        }
        let qlr = self.representation.query_lr.unwrap_or(self.representation.lr);
        if !(self.autoencoder.lr > 0.0 && self.representation.lr > 0.0 && qlr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.stride == 0 || self.batch_size == 0 || self.autoencoder.batch_size == 0 {
            return bad("stride and batch sizes must be at least 1".into());
        }
        self.weights.validate().map_err(TrainError::Config)
    }

    pub fn raster_config(&self) -> RasterConfig {
        RasterConfig::default()
    }

    /// Training and held-out episode ranges for a dataset of `n` episodes.
    pub fn split(&self, n: usize) -> Result<(Range<usize>, Range<usize>), TrainError> {
        if self.holdout_episodes >= n {
            return Err(TrainError::Config(format!(
                "{} held-out episodes leave none of {n} for training",
                self.holdout_episodes
            )));
        }
        Ok((0..n - self.holdout_episodes, n - self.holdout_episodes..n))
    }
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut x = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn elapsed(start: &Instant, deterministic: bool) -> f64 {
    if deterministic {
        0.0
    } else {
        start.elapsed().as_secs_f64()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AeMetricsRow {
    pub epoch: usize,
    pub loss: f64,
    pub wall_clock: f64,
}

#[derive(Debug, Clone)]
pub struct AeRun {
    pub ae: Autoencoder,
    pub rows: Vec<AeMetricsRow>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn batch_tensor(corpus: &[Vec<f64>], idx: &[usize]) -> Tensor {
    let data = idx.iter().flat_map(|i| corpus[*i].iter().copied()).collect();
    Tensor::from_vec(&[idx.len(), SEMANTIC_DIM], data).expect("512-d rows")
}

/// Unique per-view hierarchical vectors from the given episodes, thinned
/// evenly to at most `cap` entries.
pub fn ae_corpus(ds: &Dataset, episodes: Range<usize>, cap: usize) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut out = Vec::new();
    for e in episodes {
        for v in 0..ds.views_per_episode() {
            let (feat, stack) = ds.semantic_view(e, v)?;
            let pooled = hse::pool_stack(&stack, &feat)?;
            let mut seen = std::collections::BTreeSet::new();
            for i in 0..ds.pixels() {
                let key: Vec<u32> = stack.masks.iter().filter(|m| m.pixels[i]).map(|m| m.part_id).collect();
                if !key.is_empty() && seen.insert(key) {
                    out.push(hse::aggregate_hierarchical((i % ds.width, i / ds.width), &stack, &pooled)?);
                }
            }
        }
    }
    if out.len() > cap && cap > 0 {
        let n = out.len();
        out = (0..cap).map(|k| out[k * n / cap].clone()).collect();
    }
    Ok(out)
}

/// Mean-squared reconstruction loss over the whole corpus.
pub fn corpus_loss(ae: &Autoencoder, corpus: &[Vec<f64>]) -> Result<f64, TrainError> {
    let idx: Vec<usize> = (0..corpus.len()).collect();
    Ok(hse::ae_loss(ae, &batch_tensor(corpus, &idx))?)
}

/// Mean cosine between inputs and reconstructions.
pub fn corpus_cosine(ae: &Autoencoder, corpus: &[Vec<f64>]) -> Result<f64, TrainError> {
    let idx: Vec<usize> = (0..corpus.len()).collect();
    let recon = ae.reconstruct(&batch_tensor(corpus, &idx))?;
    let total: f64 = recon
        .data()
        .chunks(SEMANTIC_DIM)
        .zip(corpus)
        .map(|(r, x)| {
            let dot: f64 = r.iter().zip(x).map(|(a, b)| a * b).sum();
            let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nr == 0.0 || nx == 0.0 {
                0.0
            } else {
                dot / (nr * nx)
            }
        })
        .sum();
    Ok(total / corpus.len() as f64)
}

pub fn train_autoencoder(cfg: &RunConfig, corpus: &[Vec<f64>]) -> Result<AeRun, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::Config("empty autoencoder corpus".into()));
    }
    if corpus.iter().any(|v| v.len() != SEMANTIC_DIM) {
        return Err(TrainError::Config(format!("corpus vectors must have {SEMANTIC_DIM} entries")));
    }
    let start = Instant::now();
    let mut ae = Autoencoder::new(cfg.seed);
    let initial_loss = corpus_loss(&ae, corpus)?;
    let mut adam = Adam::new(cfg.autoencoder.lr, ae.params());
    let mut rows = Vec::with_capacity(cfg.autoencoder.epochs);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..cfg.autoencoder.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64 + 1));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.autoencoder.batch_size) {
            let (loss, grads) = ae.loss_and_grads(&batch_tensor(corpus, chunk))?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step: adam.step_count() + 1 });
            }
            adam.step(ae.params_mut(), &grads)?;
            total += loss * chunk.len() as f64;
        }
        rows.push(AeMetricsRow {
            epoch,
            loss: total / corpus.len() as f64,
            wall_clock: elapsed(&start, cfg.deterministic),
        });
    }
    let final_loss = corpus_loss(&ae, corpus)?;
    Ok(AeRun { ae, rows, initial_loss, final_loss })
}

pub fn write_ae_metrics(path: &Path, rows: &[AeMetricsRow]) -> Result<(), TrainError> {
    let mut s = String::from("epoch,loss,wall_clock_s\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.wall_clock));
    }
    std::fs::write(path, s).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub stats: StepStats,
    pub wall_clock: f64,
}

pub const METRICS_HEADER: &str = "iter,l_gs,l_feat,l_total,psnr,ssim,feature_cosine,wall_clock_s";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let s = &self.stats;
        let cos = s.feature_cosine.map_or(String::new(), |c| c.to_string());
        format!("{},{},{},{},{},{},{},{}", self.iter, s.l_gs, s.l_feat, s.l_total, s.psnr, s.ssim, cos, self.wall_clock)
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), TrainError> {
    let f = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(f);
    writeln!(w, "{METRICS_HEADER}").map_err(io_err(path))?;
    for r in rows {
        writeln!(w, "{}", r.csv_line()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Input views for the triple's target under a given input-view count.
/// Two views are the triple's inputs; one drops the second; three and four
/// add ring neighbours on either side.
pub fn input_views(triple: [usize; 3], views: usize, ring: usize) -> Vec<usize> {
    let [a, b, c] = triple;
    let extra = [(a + ring - 1) % ring, (c + 1) % ring];
    let mut v = vec![a, b];
    v.extend_from_slice(&extra);
    v.truncate(views.max(1));
    v
}

pub fn make_sample(ds: &Dataset, episode: usize, triple: usize, views: usize) -> Sample {
    let t = TRIPLES[triple];
    let inputs = input_views(t, views, ds.views_per_episode());
    Sample {
        inputs: inputs.iter().map(|v| ds.rgbd(episode, *v)).collect(),
        input_cameras: inputs.iter().map(|v| ds.camera(episode, *v)).collect(),
        target_camera: ds.camera(episode, t[2]),
        target_rgb: ds.target_rgb(episode, t[2]),
        target_features: ds.target_features(episode, t[2]),
    }
}

/// Sample whose target is `view`, with the two preceding ring views as inputs.
pub fn view_sample(ds: &Dataset, episode: usize, view: usize) -> Sample {
    let n = ds.views_per_episode();
    let inputs = [(view + n - 2) % n, (view + n - 1) % n];
    Sample {
        inputs: inputs.iter().map(|v| ds.rgbd(episode, *v)).collect(),
        input_cameras: inputs.iter().map(|v| ds.camera(episode, *v)).collect(),
        target_camera: ds.camera(episode, view),
        target_rgb: ds.target_rgb(episode, view),
        target_features: ds.target_features(episode, view),
    }
}

/// Step-by-step representation training over the training split.
pub struct RepresentationTrainer<'a> {
    cfg: RunConfig,
    ds: &'a Dataset,
    model: RepresentationModel,
    adam: Adam,
    qadam: Adam,
    samples: Vec<(usize, usize)>,
    order: Vec<usize>,
    epoch: usize,
    cursor: usize,
    iter: u64,
    start: Instant,
    raster: RasterConfig,
}

impl<'a> RepresentationTrainer<'a> {
    pub fn new(cfg: &RunConfig, ds: &'a Dataset) -> Result<Self, TrainError> {
        Self::with_model(cfg, ds, RepresentationModel::new(cfg.seed))
    }

    pub fn with_model(cfg: &RunConfig, ds: &'a Dataset, model: RepresentationModel) -> Result<Self, TrainError> {
        cfg.validate()?;
        if !ds.has_features() {
            return Err(TrainError::Config("dataset has no feature targets; run train-ae first".into()));
        }
        let (train, _) = cfg.split(ds.episodes.len())?;
        let samples: Vec<(usize, usize)> = train.flat_map(|e| (0..TRIPLES.len()).map(move |t| (e, t))).collect();
        let adam = Adam::new(cfg.representation.lr, model.encoder.params());
        let qlr = cfg.representation.query_lr.unwrap_or(cfg.representation.lr);
        let qadam = Adam::new(qlr, model.query.params());
        let mut me = Self {
            cfg: cfg.clone(),
            ds,
            model,
            adam,
            qadam,
            order: Vec::new(),
            samples,
            epoch: 0,
            cursor: 0,
            iter: 0,
            start: Instant::now(),
            raster: cfg.raster_config(),
        };
        me.reshuffle();
        Ok(me)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, 0x7261_6e6b ^ self.epoch as u64));
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        let full = (self.steps_per_epoch() * self.cfg.representation.epochs) as u64;
        self.cfg.representation.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn iter(&self) -> u64 {
        self.iter
    }

    pub fn model(&self) -> &RepresentationModel {
        &self.model
    }

    pub fn into_model(self) -> RepresentationModel {
        self.model
    }

    /// One optimizer step. Returns the logged row and the averaged gradients
    /// that were applied, or `None` once training is complete.
    pub fn step(&mut self) -> Result<Option<(MetricsRow, Vec<Tensor>)>, TrainError> {
        if self.iter >= self.total_steps() {
            return Ok(None);
        }
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.cursor + self.cfg.batch_size).min(self.order.len());
        let batch: Vec<(usize, usize)> = self.order[self.cursor..end].iter().map(|i| self.samples[*i]).collect();
        self.cursor = end;
        let mut acc: Option<Vec<Tensor>> = None;
        let mut sum = StepStats { l_gs: 0.0, l_feat: 0.0, l_total: 0.0, psnr: 0.0, ssim: 0.0, feature_cosine: None };
        let mut cos = (0.0, 0usize);
        for &(e, t) in &batch {
            let sample = make_sample(self.ds, e, t, 2);
            let (st, grads) =
                self.model.loss_and_grads(&sample, &self.cfg.weights, self.iter, self.cfg.stride, &self.raster)?;
            if !st.l_total.is_finite() {
                return Err(TrainError::Diverged { step: self.iter + 1 });
            }
            sum.l_gs += st.l_gs;
            sum.l_feat += st.l_feat;
            sum.l_total += st.l_total;
            sum.psnr += st.psnr;
            sum.ssim += st.ssim;
            if let Some(c) = st.feature_cosine {
                cos = (cos.0 + c, cos.1 + 1);
            }
            match acc.as_mut() {
                None => acc = Some(grads),
                Some(a) => a.iter_mut().zip(&grads).for_each(|(x, g)| x.add_assign(g)),
            }
        }
        let n = batch.len() as f64;
        let mut grads = acc.expect("batch is nonempty");
        if batch.len() > 1 {
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v /= n);
            }
        }
        let ne = self.model.encoder.params().len();
        self.adam.step(self.model.encoder.params_mut(), &grads[..ne])?;
        self.qadam.step(self.model.query.params_mut(), &grads[ne..])?;
        let stats = StepStats {
            l_gs: sum.l_gs / n,
            l_feat: sum.l_feat / n,
            l_total: sum.l_total / n,
            psnr: sum.psnr / n,
            ssim: sum.ssim / n,
            feature_cosine: (cos.1 > 0).then(|| cos.0 / cos.1 as f64),
        };
        let row = MetricsRow { iter: self.iter, stats, wall_clock: elapsed(&self.start, self.cfg.deterministic) };
        self.iter += 1;
        Ok(Some((row, grads)))
    }
}

/// Runs representation training to completion, calling `on_row` after each step.
pub fn train_representation(
    cfg: &RunConfig,
    ds: &Dataset,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<(RepresentationModel, Vec<MetricsRow>), TrainError> {
    let mut t = RepresentationTrainer::new(cfg, ds)?;
    let mut rows = Vec::new();
    while let Some((row, _)) = t.step()? {
        on_row(&row);
        rows.push(row);
    }
    Ok((t.into_model(), rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub episode: usize,
    pub triple: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub feature_cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: Vec<SampleMetrics>,
    pub psnr: Stat,
    pub ssim: Stat,
    pub feature_cosine: Stat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub stride: usize,
    /// Input views per sample (2 is the trained setting).
    pub views: usize,
    pub weights: LossWeights,
    pub parallel: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { stride: 2, views: 2, weights: LossWeights::default(), parallel: true }
    }
}

pub fn evaluate(
    model: &RepresentationModel,
    ds: &Dataset,
    episodes: Range<usize>,
    opts: &EvalOptions,
) -> Result<EvalReport, TrainError> {
    let jobs: Vec<(usize, usize)> = episodes.flat_map(|e| (0..TRIPLES.len()).map(move |t| (e, t))).collect();
    let cfg = RasterConfig { parallel: false, ..RasterConfig::default() };
    let results = crate::par::map_indexed(jobs.len(), opts.parallel, |j| {
        let (e, t) = jobs[j];
        let s = make_sample(ds, e, t, opts.views);
        model.evaluate_sample(&s, &opts.weights, opts.stride, &cfg)
    });
    let mut samples = Vec::with_capacity(jobs.len());
    for ((e, t), r) in jobs.into_iter().zip(results) {
        let st = r?;
        samples.push(SampleMetrics {
            episode: e,
            triple: t,
            psnr: st.psnr,
            ssim: st.ssim,
            feature_cosine: st.feature_cosine,
        });
    }
    let col = |f: &dyn Fn(&SampleMetrics) -> Option<f64>| -> Vec<f64> { samples.iter().filter_map(f).collect() };
    Ok(EvalReport {
        psnr: Stat::of(&col(&|s| Some(s.psnr))),
        ssim: Stat::of(&col(&|s| Some(s.ssim))),
        feature_cosine: Stat::of(&col(&|s| s.feature_cosine)),
        samples,
    })
}

/// Checksum that ties a dataset's feature targets to an autoencoder checkpoint.
pub fn checkpoint_checksum(c: &Checkpoint) -> u32 {
    // the serialized form already ends in its own crc, which would make a
    // crc over the whole buffer constant
    let bytes = c.to_bytes();
    crc32fast::hash(&bytes[..bytes.len() - 4])
}

/// Summary of [`run_train_ae`].
#[derive(Debug, Clone)]
pub struct AeSummary {
    pub checkpoint: PathBuf,
    pub corpus_size: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn ensure_dir(dir: &Path) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Pretrains the autoencoder on the dataset's training split, writes
/// `ae.ckpt` and `ae_metrics.csv`, and rewrites the dataset with cached
/// compact targets.
pub fn run_train_ae(cfg: &RunConfig) -> Result<AeSummary, TrainError> {
    cfg.validate()?;
    let mut ds = Dataset::load(&cfg.dataset)?;
    let (train, _) = cfg.split(ds.episodes.len())?;
    let corpus = ae_corpus(&ds, train, cfg.autoencoder.corpus_cap)?;
    let run = train_autoencoder(cfg, &corpus)?;
    ensure_dir(&cfg.output_dir)?;
    let ckpt = run.ae.to_checkpoint();
    let path = cfg.output_dir.join("ae.ckpt");
    ckpt.save(&path)?;
    write_ae_metrics(&cfg.output_dir.join("ae_metrics.csv"), &run.rows)?;
    ds.attach_features(&run.ae, checkpoint_checksum(&ckpt), true)?;
    ds.save(&cfg.dataset)?;
    Ok(AeSummary {
        checkpoint: path,
        corpus_size: corpus.len(),
        initial_loss: run.initial_loss,
        final_loss: run.final_loss,
    })
}

/// Trains the representation, writing `model.ckpt` and `metrics.csv`.
pub fn run_train(cfg: &RunConfig, ae_ckpt: &Path, on_row: impl FnMut(&MetricsRow)) -> Result<PathBuf, TrainError> {
    cfg.validate()?;
    let ae = Checkpoint::load(ae_ckpt)?;
    Autoencoder::from_checkpoint(&ae)?;
    let ds = Dataset::load(&cfg.dataset)?;
    match ds.ae_checksum {
        None => return Err(TrainError::Config("dataset has no feature targets; run train-ae first".into())),
        Some(c) if c != checkpoint_checksum(&ae) => {
            return Err(TrainError::Config(format!(
                "dataset targets were made by autoencoder {c:08x}, not {}",
                ae_ckpt.display()
            )))
        }
        Some(_) => {}
    }
    let (model, rows) = train_representation(cfg, &ds, on_row)?;
    ensure_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("model.ckpt");
    model.to_checkpoint().save(&path)?;
    write_metrics(&cfg.output_dir.join("metrics.csv"), &rows)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{generate_dataset, DatasetConfig};

    fn tiny_dataset(episodes: usize) -> Dataset {
        let mut ds = generate_dataset(&DatasetConfig { seed: 11, episodes, ..Default::default() }, true);
        ds.attach_features(&Autoencoder::new(4), 9, true).unwrap();
        ds
    }

    #[test]
    fn checksum_distinguishes_checkpoints() {
        let a = Autoencoder::new(1).to_checkpoint();
        let b = Autoencoder::new(2).to_checkpoint();
        assert_eq!(checkpoint_checksum(&a), checkpoint_checksum(&a.clone()));
        assert_ne!(checkpoint_checksum(&a), checkpoint_checksum(&b));
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = RunConfig::from_toml("seed = 9\n[representation]\nlr = 1e-3\n").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.representation.lr, 1e-3);
        assert_eq!(partial.representation.epochs, 10);
        assert_eq!(partial.autoencoder.lr, 5e-4);
        assert!(RunConfig::from_toml("profile = \"f32\"").is_err());
        assert!(RunConfig::from_toml("[representation]\nlr = 0.0").is_err());
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        let flags = RunConfig { seed: 4, stride: 3, ..RunConfig::default() };
        let merged = RunConfig::layered(&flags, "stride = 1\n[autoencoder]\nepochs = 7\n").unwrap();
        assert_eq!((merged.seed, merged.stride, merged.autoencoder.epochs, merged.autoencoder.lr), (4, 1, 7, 5e-4));
    }

    #[test]
    fn input_view_selection() {
        assert_eq!(input_views([3, 4, 5], 2, 12), vec![3, 4]);
        assert_eq!(input_views([3, 4, 5], 1, 12), vec![3]);
        assert_eq!(input_views([0, 1, 2], 4, 12), vec![0, 1, 11, 3]);
    }

    #[test]
    fn autoencoder_training_is_reproducible() {
        let provider = hse::SyntheticProvider::new(3);
        let corpus: Vec<Vec<f64>> =
            (0..4).flat_map(|c| (0..2).map(move |p| (c, p))).map(|(c, p)| provider.part_vector(c, p)).collect();
        let cfg = RunConfig {
            autoencoder: AeConfig { epochs: 5, batch_size: 4, ..AeConfig::default() },
            ..RunConfig::default()
        };
        let a = train_autoencoder(&cfg, &corpus).unwrap();
        let b = train_autoencoder(&cfg, &corpus).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.ae.to_checkpoint().to_bytes(), b.ae.to_checkpoint().to_bytes());
        assert!(a.final_loss < a.initial_loss);
        assert!(train_autoencoder(&cfg, &[]).is_err());
    }

    #[test]
    fn corpus_is_capped_and_unique_per_view() {
        let ds = tiny_dataset(2);
        let full = ae_corpus(&ds, 0..2, 0).unwrap();
        assert!(!full.is_empty());
        let capped = ae_corpus(&ds, 0..2, 5).unwrap();
        assert_eq!(capped.len(), 5.min(full.len()));
    }

    #[test]
    fn missing_targets_are_a_configuration_error() {
        let ds = generate_dataset(&DatasetConfig { seed: 1, episodes: 2, ..Default::default() }, true);
        let cfg = RunConfig { holdout_episodes: 1, ..RunConfig::default() };
        assert!(matches!(RepresentationTrainer::new(&cfg, &ds), Err(TrainError::Config(_))));
    }

    #[test]
    fn short_run_is_deterministic_and_respects_warmup() {
        let ds = tiny_dataset(2);
        let cfg = RunConfig {
            holdout_episodes: 1,
            weights: LossWeights { warmup_iters: 2, ..LossWeights::default() },
            representation: RepConfig { lr: 1e-3, epochs: 1, max_steps: Some(3), ..RepConfig::default() },
            ..RunConfig::default()
        };
        let mut t = RepresentationTrainer::new(&cfg, &ds).unwrap();
        let range = t.model().feature_head_range();
        let before: Vec<Tensor> = t.model().params()[range.clone()].iter().map(|p| (*p).clone()).collect();
        let mut rows = Vec::new();
        while let Some((row, grads)) = t.step().unwrap() {
            let now: Vec<Tensor> = t.model().params()[range.clone()].iter().map(|p| (*p).clone()).collect();
            if row.iter < 2 {
                assert!(grads[range.clone()].iter().all(|g| g.data().iter().all(|v| *v == 0.0)));
                assert_eq!(now, before);
            } else {
                assert_ne!(now, before);
            }
            rows.push(row);
        }
        assert_eq!(rows.len(), 3);
        let (m2, rows2) = train_representation(&cfg, &ds, |_| {}).unwrap();
        assert_eq!(rows, rows2);
        assert_eq!(t.into_model().to_checkpoint().to_bytes(), m2.to_checkpoint().to_bytes());
    }

    #[test]
    fn evaluation_is_finite_and_checkpoint_stable() {
        let ds = tiny_dataset(1);
        let model = RepresentationModel::new(5);
        let opts = EvalOptions::default();
        let r = evaluate(&model, &ds, 0..1, &opts).unwrap();
        assert_eq!(r.samples.len(), 4);
        assert!(r.psnr.mean.is_finite() && r.ssim.mean.is_finite());
        let back =
            RepresentationModel::from_checkpoint(&Checkpoint::from_bytes(&model.to_checkpoint().to_bytes()).unwrap())
                .unwrap();
        assert_eq!(evaluate(&back, &ds, 0..1, &opts).unwrap(), r);
        for v in [1, 3, 4] {
            let r = evaluate(&model, &ds, 0..1, &EvalOptions { views: v, ..opts.clone() }).unwrap();
            assert!(r.psnr.mean.is_finite());
        }
    }

    #[test]
    fn stats_of_values() {
        let s = Stat::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert!(Stat::of(&[]).mean.is_nan());
    }
}
