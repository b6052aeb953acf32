use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use qgfs::gradcheck;
use qgfs::losses::LossWeights;
use qgfs::model::RepresentationModel;
use qgfs::nnkit::Checkpoint;
use qgfs::raster::{dump, RasterConfig, FEATURE_DIM};
use qgfs::scenes::{generate_dataset, generate_scene, render_episode, CameraRig, Dataset, DatasetConfig};
use qgfs::trainer::{self, EvalOptions, RunConfig};

const ERR: &str = "QGFS-ERR:";

#[derive(Parser)]
#[command(name = "qgfs", version, about = "Generalizable Gaussian feature splatting at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multiview dataset.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the semantic autoencoder and cache compact targets in the dataset.
    TrainAe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the encoder and query network.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ae_ckpt: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render a novel view of a regenerated scene.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// Scene seed.
        #[arg(long)]
        scene: u64,
        #[arg(long, default_value_t = 2)]
        view: usize,
        /// Image path; `.png` or `.ppm`. Feature planes go next to it as `.feat`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        stride: usize,
    },
    /// Held-out metrics of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Input views per sample.
        #[arg(long, default_value_t = 2)]
        views: usize,
        /// Trailing episodes to evaluate; 0 evaluates all.
        #[arg(long, default_value_t = 8)]
        holdout: usize,
        #[arg(long, default_value_t = 2)]
        stride: usize,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, value_enum)]
        module: CheckModule,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckModule {
    Raster,
    Nnkit,
    E2e,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{ERR} usage: {e}");
            return ExitCode::from(2);
        }
    };
    let threads = std::env::var("QGFS_THREADS").ok().and_then(|v| v.trim().parse().ok()).unwrap_or(0);
    qgfs::par::configure_threads(threads);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{ERR} {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = RunConfig::layered(&RunConfig::default(), &text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { seed, episodes, out } => {
            if episodes == 0 {
                bail!("--episodes must be at least 1");
            }
            let ds = generate_dataset(&DatasetConfig { seed, episodes, ..DatasetConfig::default() }, true);
            ds.save(&out)?;
            println!("wrote {} episodes to {}", episodes, out.display());
        }
        Command::TrainAe { config, seed } => {
            let cfg = load_config(&config, seed)?;
            let s = trainer::run_train_ae(&cfg)?;
            println!(
                "corpus {} vectors, loss {:.6} -> {:.6}, checkpoint {}",
                s.corpus_size,
                s.initial_loss,
                s.final_loss,
                s.checkpoint.display()
            );
        }
        Command::Train { config, ae_ckpt, seed } => {
            let cfg = load_config(&config, seed)?;
            let every = 50;
            let path = trainer::run_train(&cfg, &ae_ckpt, |r| {
                if r.iter % every == 0 {
                    eprintln!("{}", r.csv_line());
                }
            })?;
            println!("checkpoint {}", path.display());
        }
        Command::Render { ckpt, scene, view, out, stride } => {
            let model = RepresentationModel::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let rig = CameraRig::default();
            if view >= rig.views {
                bail!("view {view} out of range for a {}-view rig", rig.views);
            }
            let (_, cloud) = generate_scene(scene);
            let episode = render_episode(scene, &cloud, &rig);
            let ds = Dataset {
                width: rig.resolution,
                height: rig.resolution,
                intrinsics: rig.intrinsics(),
                seed: scene,
                semantic_seed: 0,
                ae_checksum: None,
                episodes: vec![episode],
            };
            let sample = trainer::view_sample(&ds, 0, view);
            let (_, img) = model.predict(&sample, stride, &RasterConfig::default())?;
            write_image(&out, img.width, img.height, &img.color)?;
            let feat = out.with_extension("feat");
            let f = File::create(&feat).with_context(|| format!("creating {}", feat.display()))?;
            dump::write_planes(BufWriter::new(f), img.width, img.height, FEATURE_DIM, &img.feature)?;
            println!("wrote {} and {}", out.display(), feat.display());
        }
        Command::Eval { ckpt, data, views, holdout, stride } => {
            if !(1..=4).contains(&views) {
                bail!("--views must be between 1 and 4");
            }
            let model = RepresentationModel::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let ds = Dataset::load(&data)?;
            let n = ds.episodes.len();
            let start = if holdout == 0 || holdout >= n { 0 } else { n - holdout };
            let opts = EvalOptions { stride, views, weights: LossWeights::default(), parallel: true };
            let r = trainer::evaluate(&model, &ds, start..n, &opts)?;
            println!(
                "{}",
                serde_json::json!({
                    "episodes": [start, n],
                    "views": views,
                    "samples": r.samples.len(),
                    "psnr": r.psnr,
                    "ssim": r.ssim,
                    "feature_cosine": r.feature_cosine,
                })
            );
        }
        Command::Gradcheck { module, trials, seed } => {
            let report = match module {
                CheckModule::Raster => gradcheck::raster(trials.max(1), seed),
                CheckModule::Nnkit => gradcheck::network(seed)?,
                CheckModule::E2e => gradcheck::end_to_end(seed, trials.max(1))?,
            };
            println!("{}", serde_json::to_string(&report)?);
            let ok = match module {
                CheckModule::E2e => report.passes(0.0, 1e-2),
                CheckModule::Raster => report.passes(0.95, 1e-2),
                CheckModule::Nnkit => report.passes(1.0, 1e-4),
            };
            if !ok {
                bail!("gradient check failed: max relative error {:.3e}", report.max_rel);
            }
        }
    }
    Ok(())
}

fn write_image(path: &Path, width: usize, height: usize, color: &[f64]) -> Result<()> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => {
            let buf = image::RgbImage::from_raw(width as u32, height as u32, dump::rgb_bytes(color))
                .context("image buffer size")?;
            buf.save(path).with_context(|| format!("writing {}", path.display()))?;
        }
        Some("ppm") => {
            let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            dump::write_ppm(BufWriter::new(f), width, height, color)?;
        }
        _ => bail!("output must end in .png or .ppm: {}", path.display()),
    }
    Ok(())
}
