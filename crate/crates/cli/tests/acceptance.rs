//! Acceptance checks, one line per criterion.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};

use qgfs::geom::{project_point, unproject_pixel, Camera, Quaternion};
use qgfs::gradcheck;
use qgfs::hse::{self, FeatureMap, MaskLevel, MaskStack, SyntheticProvider, SEMANTIC_DIM};
use qgfs::losses::{ssim, ImageShape, LossWeights};
use qgfs::model::RepresentationModel;
use qgfs::nnkit::Checkpoint;
use qgfs::raster::{brute_force_render, render, Gaussian, GaussianCloud, RasterConfig};
use qgfs::scenes::{generate_dataset, Dataset, DatasetConfig};
use qgfs::trainer::{self, AeConfig, EvalOptions, RepConfig, RepresentationTrainer, RunConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let count = 1 + (seed as usize * 37) % 200;
        let (cloud, cam) = gradcheck::micro_scene(1000 + seed, count, 64);
        let (fast, _) = render(&cloud, &cam, &RasterConfig::exact());
        let slow = brute_force_render(&cloud, &cam);
        worst = worst.max(max_abs_diff(&fast.color, &slow.color)).max(max_abs_diff(&fast.feature, &slow.feature));
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-5 && secs <= 60.0, format!("50 scenes, max abs diff {worst:.2e}, {secs:.1}s"))
}

fn gradient_fidelity() -> Outcome {
    let r = gradcheck::raster(20, 0);
    let e = gradcheck::end_to_end(0, 4).map_err(|e| e.to_string())?;
    let frac = r.within_tight as f64 / r.checked as f64;
    check(
        frac >= 0.95 && r.max_rel <= 1e-2 && e.max_rel <= 1e-2,
        format!(
            "raster {} components, {:.1}% within 1e-3, max rel {:.2e}; end-to-end {} components, max rel {:.2e}",
            r.checked,
            100.0 * frac,
            r.max_rel,
            e.checked,
            e.max_rel
        ),
    )
}

fn blending_ground_truth() -> Outcome {
    let cam = Camera::identity_pose(1.0, 1.0, 0.0, 0.0, 1, 1);
    let splat = |z: f64, color: [f64; 3]| Gaussian {
        mean: Vector3::new(0.5 * z, 0.5 * z, z),
        rotation: Quaternion::from_array([1.0, 0.0, 0.0, 0.0]),
        scale: [10.0 * z; 3],
        opacity: 0.5,
        color,
        feature: [0.0; 3],
    };
    let cloud = GaussianCloud::new(vec![splat(2.0, [0.0, 0.0, 1.0]), splat(1.0, [1.0, 0.0, 0.0])]);
    let (out, _) = render(&cloud, &cam, &RasterConfig::default());
    check(out.color == vec![0.5, 0.0, 0.25], format!("pixel {:?}", out.color))
}

fn hse_correctness() -> Outcome {
    let (w, h) = (16, 16);
    let provider = SyntheticProvider::new(3);
    let mut feat = FeatureMap::zeros(w, h, SEMANTIC_DIM);
    for i in 0..w * h {
        let v = provider.part_vector((i % 5) as u32, (i % 3) as u32);
        let scale = 0.5 + (i % 7) as f64;
        feat.pixel_mut(i).iter_mut().zip(&v).for_each(|(d, s)| *d = s * scale);
    }
    let mut stack = MaskStack::new(w, h);
    let rect = |x0: usize, x1: usize, y0: usize, y1: usize| -> Vec<bool> {
        (0..w * h).map(|i| (x0..x1).contains(&(i % w)) && (y0..y1).contains(&(i / w))).collect()
    };
    stack.push(0, MaskLevel::Object, rect(0, 12, 0, 12)).unwrap();
    stack.push(1, MaskLevel::Part, rect(0, 8, 0, 12)).unwrap();
    stack.push(2, MaskLevel::Part, rect(6, 12, 4, 12)).unwrap();
    stack.push(3, MaskLevel::Object, rect(12, 16, 10, 16)).unwrap();

    // independent per-pixel recomputation
    let brute_pool = |mask: &[bool]| -> Vec<f64> {
        let mut acc = vec![0.0; SEMANTIC_DIM];
        let mut n = 0.0;
        for i in (0..w * h).filter(|i| mask[*i]) {
            let p = feat.pixel(i);
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            for k in 0..SEMANTIC_DIM {
                acc[k] += p[k] / norm;
            }
            n += 1.0;
        }
        acc.into_iter().map(|v| v / n).collect()
    };
    let pooled = hse::pool_stack(&stack, &feat).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut brute: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for m in &stack.masks {
        let b = brute_pool(&m.pixels);
        worst = worst.max(max_abs_diff(&b, &pooled[&m.part_id]));
        brute.insert(m.part_id, b);
    }
    let map = hse::hierarchical_map(&stack, &pooled, true).map_err(|e| e.to_string())?;
    for i in 0..w * h {
        let covering: Vec<&Vec<f64>> = stack.masks.iter().filter(|m| m.pixels[i]).map(|m| &brute[&m.part_id]).collect();
        let want: Vec<f64> = if covering.is_empty() {
            vec![0.0; SEMANTIC_DIM]
        } else {
            (0..SEMANTIC_DIM).map(|k| covering.iter().map(|v| v[k]).sum::<f64>() / covering.len() as f64).collect()
        };
        worst = worst.max(max_abs_diff(&want, map.pixel(i)));
    }
    // (7, 5) lies in the object and both parts
    let two = 5 * w + 7;
    let exact_two: Vec<f64> =
        (0..SEMANTIC_DIM).map(|k| (pooled[&0][k] + pooled[&1][k] + pooled[&2][k]) / 3.0).collect();
    let parts_only =
        hse::hierarchical_map(&MaskStack { width: w, height: h, masks: stack.masks[1..3].to_vec() }, &pooled, false)
            .map_err(|e| e.to_string())?;
    let mean_parts: Vec<f64> = (0..SEMANTIC_DIM).map(|k| (pooled[&1][k] + pooled[&2][k]) / 2.0).collect();
    let exact = map.pixel(two) == exact_two.as_slice() && parts_only.pixel(two) == mean_parts.as_slice();
    check(worst <= 1e-6 && exact, format!("max abs diff {worst:.2e}, two-part pixel exact: {exact}"))
}

fn autoencoder_compression() -> Outcome {
    let provider = SyntheticProvider::new(5);
    let corpus: Vec<Vec<f64>> =
        (0..4).flat_map(|c| (0..4).map(move |p| (c, p))).map(|(c, p)| provider.part_vector(c, p)).collect();
    let cfg = RunConfig {
        autoencoder: AeConfig { epochs: 200, batch_size: 16, ..AeConfig::default() },
        ..RunConfig::default()
    };
    let run = trainer::train_autoencoder(&cfg, &corpus).map_err(|e| e.to_string())?;
    let cos = trainer::corpus_cosine(&run.ae, &corpus).map_err(|e| e.to_string())?;
    let ratio = run.final_loss / run.initial_loss;
    check(
        ratio <= 0.1 && cos >= 0.95,
        format!(
            "16 parts, lr {}, {} epochs: mse {:.3e} -> {:.3e} ({:.1}%), cosine {cos:.4}",
            cfg.autoencoder.lr,
            cfg.autoencoder.epochs,
            run.initial_loss,
            run.final_loss,
            100.0 * ratio
        ),
    )
}

fn representation_learning() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig { threads: 1, ..RunConfig::default() };
    let mut ds = generate_dataset(&DatasetConfig::default(), false);
    let (train, held) = cfg.split(ds.episodes.len()).map_err(|e| e.to_string())?;
    let corpus = trainer::ae_corpus(&ds, train, cfg.autoencoder.corpus_cap).map_err(|e| e.to_string())?;
    let ae = trainer::train_autoencoder(&cfg, &corpus).map_err(|e| e.to_string())?;
    ds.attach_features(&ae.ae, trainer::checkpoint_checksum(&ae.ae.to_checkpoint()), false)
        .map_err(|e| e.to_string())?;

    let opts = EvalOptions { parallel: false, ..EvalOptions::default() };
    let base =
        trainer::evaluate(&RepresentationModel::new(cfg.seed), &ds, held.clone(), &opts).map_err(|e| e.to_string())?;
    let (model, rows) = trainer::train_representation(&cfg, &ds, |_| {}).map_err(|e| e.to_string())?;
    let after = trainer::evaluate(&model, &ds, held, &opts).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let gain = after.psnr.mean - base.psnr.mean;
    let w = &cfg.weights;
    check(
        gain >= 6.0 && after.feature_cosine.mean >= 0.7 && secs <= 1800.0,
        format!(
            "{} steps, weights b1={} b2={} eta={} lambda={}: held-out psnr {:.2} -> {:.2} dB ({gain:+.2}), feature cosine {:.3} -> {:.3}, {secs:.0}s",
            rows.len(),
            w.beta1,
            w.beta2,
            w.eta,
            w.lambda,
            base.psnr.mean,
            after.psnr.mean,
            base.feature_cosine.mean,
            after.feature_cosine.mean
        ),
    )
}

fn small_dataset(episodes: usize) -> Dataset {
    let mut ds = generate_dataset(&DatasetConfig { seed: 21, episodes, ..DatasetConfig::default() }, false);
    let ae = hse::Autoencoder::new(2);
    ds.attach_features(&ae, trainer::checkpoint_checksum(&ae.to_checkpoint()), false).unwrap();
    ds
}

fn warmup_gate() -> Outcome {
    let ds = small_dataset(3);
    let warm = 4;
    let cfg = RunConfig {
        holdout_episodes: 1,
        weights: LossWeights { warmup_iters: warm, ..LossWeights::default() },
        representation: RepConfig { max_steps: Some(warm + 2), ..RepConfig::default() },
        ..RunConfig::default()
    };
    let mut t = RepresentationTrainer::new(&cfg, &ds).map_err(|e| e.to_string())?;
    let range = t.model().feature_head_range();
    let bytes = |m: &RepresentationModel| -> Vec<u64> {
        m.params()[range.clone()].iter().flat_map(|p| p.data().iter().map(|v| v.to_bits())).collect()
    };
    let before = bytes(t.model());
    let (mut gated, mut moved_after) = (0, false);
    while let Some((row, grads)) = t.step().map_err(|e| e.to_string())? {
        let zero = grads[range.clone()].iter().all(|g| g.data().iter().all(|v| *v == 0.0));
        if row.iter < warm {
            if !zero || bytes(t.model()) != before {
                return Err(format!("feature head changed at iteration {}", row.iter));
            }
            gated += 1;
        } else if bytes(t.model()) != before {
            moved_after = true;
        }
    }
    check(
        gated == warm && moved_after,
        format!("{gated} gated iterations unchanged, head trains afterwards: {moved_after}"),
    )
}

fn ssim_unit() -> Outcome {
    let shape = ImageShape::new(20, 16, 3);
    let img: Vec<f64> = (0..shape.len()).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect();
    let same = ssim(&img, &img, shape).map_err(|e| e.to_string())?;
    let (a, b) = (0.3, 0.7);
    let c1 = (0.01f64).powi(2);
    let closed = (2.0 * a * b + c1) / (a * a + b * b + c1);
    let got = ssim(&vec![a; shape.len()], &vec![b; shape.len()], shape).map_err(|e| e.to_string())?;
    check(
        same == 1.0 && (got - closed).abs() <= 1e-9,
        format!("ssim(I,I) = {same}, constant case error {:.1e}", (got - closed).abs()),
    )
}

fn qgfs() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_qgfs"));
    c.env("QGFS_THREADS", "1");
    c
}

fn run_ok(cmd: &mut Command) -> Result<(), String> {
    let o = cmd.output().map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&o.stderr).into_owned())
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |x: &Path| x.to_str().unwrap().to_owned();
    let data = dir.path().join("d.qgfsds");
    let run = dir.path().join("run");
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        format!(
            "dataset = {:?}\noutput_dir = {:?}\nholdout_episodes = 1\nthreads = 1\n[autoencoder]\nepochs = 5\n[representation]\nmax_steps = 6\n",
            p(&data),
            p(&run)
        ),
    )
    .map_err(|e| e.to_string())?;
    run_ok(qgfs().args(["gen-data", "--seed", "4", "--episodes", "3", "--out", &p(&data)]))?;
    run_ok(qgfs().args(["train-ae", "--config", &p(&cfg)]))?;
    let ae = p(&run.join("ae.ckpt"));
    let mut outputs = Vec::new();
    for _ in 0..2 {
        run_ok(qgfs().args(["train", "--config", &p(&cfg), "--ae-ckpt", &ae, "--seed", "17"]))?;
        let ck = std::fs::read(run.join("model.ckpt")).map_err(|e| e.to_string())?;
        let csv = std::fs::read(run.join("metrics.csv")).map_err(|e| e.to_string())?;
        outputs.push((ck, csv));
    }
    let same = outputs[0] == outputs[1];
    check(
        same,
        format!("checkpoint {} bytes, metrics {} bytes, identical: {same}", outputs[0].0.len(), outputs[0].1.len()),
    )
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds = small_dataset(2);
    let path = dir.path().join("d.qgfsds");
    ds.save(&path).map_err(|e| e.to_string())?;
    let written = std::fs::read(&path).map_err(|e| e.to_string())?;
    let back = Dataset::load(&path).map_err(|e| e.to_string())?;
    let ds_ok = back.to_bytes() == written && back == ds;

    let model = RepresentationModel::new(8);
    let cpath = dir.path().join("m.ckpt");
    model.to_checkpoint().save(&cpath).map_err(|e| e.to_string())?;
    let loaded = RepresentationModel::from_checkpoint(&Checkpoint::load(&cpath).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let opts = EvalOptions::default();
    let a = trainer::evaluate(&model, &ds, 0..2, &opts).map_err(|e| e.to_string())?;
    let b = trainer::evaluate(&loaded, &ds, 0..2, &opts).map_err(|e| e.to_string())?;
    let ck_ok = a == b;

    let rot = Matrix3::from_columns(&[Vector3::x(), -Vector3::z(), Vector3::y()]);
    let cam =
        Camera::new(60.0, 58.0, 31.5, 30.5, 64, 64, rot, Vector3::new(0.2, -1.5, 0.4)).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for v in 0..64 {
        for u in 0..64 {
            let depth = 0.3 + 0.05 * ((u * 13 + v * 7) % 40) as f64;
            let (uf, vf) = (u as f64 + 0.5, v as f64 + 0.5);
            let pp = project_point(&unproject_pixel(uf, vf, depth, &cam), &cam).ok_or("point behind camera")?;
            worst = worst.max((pp.u - uf).abs()).max((pp.v - vf).abs()).max((pp.depth - depth).abs());
        }
    }
    check(
        ds_ok && ck_ok && worst <= 1e-6,
        format!(
            "dataset bytes identical: {ds_ok}, checkpoint evaluation identical: {ck_ok}, pixel round-trip {worst:.1e}"
        ),
    )
}

#[test]
fn acceptance() {
    qgfs::par::configure_threads(1);
    let criteria: [Criterion; 10] = [
        ("rasterizer oracle equivalence", oracle_equivalence),
        ("gradient fidelity", gradient_fidelity),
        ("blending ground truth", blending_ground_truth),
        ("HSE correctness", hse_correctness),
        ("autoencoder compression", autoencoder_compression),
        ("end-to-end representation learning", representation_learning),
        ("warm-up gate", warmup_gate),
        ("SSIM unit", ssim_unit),
        ("determinism", determinism),
        ("round-trips", round_trips),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let r = f();
        let secs = start.elapsed().as_secs_f64();
        match &r {
            Ok(d) => println!("criterion {:>2} PASS {name}: {d} [{secs:.1}s]", i + 1),
            Err(d) => {
                println!("criterion {:>2} FAIL {name}: {d} [{secs:.1}s]", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
