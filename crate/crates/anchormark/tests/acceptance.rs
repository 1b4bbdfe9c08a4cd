//! Acceptance suite: each test pins one exit criterion at its stated
//! tolerance and wall-clock budget, and prints one pass/fail line.
//!
//! Everything runs on the stub backbone at desk scale except the final
//! opt-in test, which needs pretrained weights (see its docs).

use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use anchormark::backbone::{Backbone, StubBackbone};
use anchormark::distortion::{self, DistortionKind, DistortionSpec};
use anchormark::extractor::ProjectedExtractor;
use anchormark::imageio::{generate_synthetic_corpus, generate_synthetic_items, ImageTensor};
use anchormark::linalg::{self, Matrix};
use anchormark::losses::{self, BatchFeatures, LossConfig};
use anchormark::projector::{self, ProjectorConfig};
use anchormark::trainer::{self, TrainConfig};
use anchormark::watermark::{self, EmbedConfig, SecretKey, WatermarkMessage};
use anchormark::rng;
#[allow(unused_imports)]
use anchormark::imageio;

/// Run one criterion, printing `PASS`/`FAIL` with the elapsed time, and
/// enforce the budget.
fn criterion(name: &str, budget_secs: f64, body: impl FnOnce() + std::panic::UnwindSafe) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(body));
    let elapsed = start.elapsed().as_secs_f64();
    match outcome {
        Ok(()) => {
            println!("acceptance: {name}: PASS ({elapsed:.2}s, budget {budget_secs}s)");
            assert!(
                elapsed < budget_secs,
                "{name} exceeded its runtime budget: {elapsed:.2}s >= {budget_secs}s"
            );
        }
        Err(panic) => {
            println!("acceptance: {name}: FAIL ({elapsed:.2}s)");
            resume_unwind(panic);
        }
    }
}

fn random_matrix(n: usize, d: usize, seed: u64) -> Matrix {
    let mut r = rng::derive(seed, "acc-matrix", 0, 0);
    let mut z = Matrix::zeros(n, d);
    for v in z.data.iter_mut() {
        *v = rand::Rng::gen_range(&mut r, -2.0..2.0);
    }
    z
}

fn unit_rows(n: usize, d: usize, seed: u64) -> Matrix {
    let mut z = random_matrix(n, d, seed);
    for i in 0..n {
        linalg::normalize(z.row_mut(i));
    }
    z
}

fn random_batch(n: usize, d: usize, seed: u64) -> BatchFeatures {
    BatchFeatures::from_parts_unchecked(
        unit_rows(n, d, seed),
        unit_rows(n, d, seed + 1),
        unit_rows(n, d, seed + 2),
        unit_rows(n, d, seed + 3),
        unit_rows(n, d, seed + 4),
    )
}

/// Independent oracle: materialize the covariance and double-loop i != j.
fn brute_force_decorr(z: &Matrix) -> f64 {
    let (n, d) = (z.rows, z.cols);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(z.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut loss = 0.0;
    for a in 0..d {
        for b in 0..d {
            if a == b {
                continue;
            }
            let mut c_ab = 0.0;
            for i in 0..n {
                c_ab += (z.row(i)[a] - mean[a]) * (z.row(i)[b] - mean[b]);
            }
            loss += (c_ab / n as f64) * (c_ab / n as f64);
        }
    }
    loss
}

// ---------------------------------------------------------------------------
// Criterion: loss correctness.
// ---------------------------------------------------------------------------

#[test]
fn loss_correctness() {
    criterion("loss correctness (decorrelation vs brute force)", 5.0, || {
        for trial in 0..50u64 {
            let n = 2 + (trial % 7) as usize;
            let d = 1 + (trial % 8) as usize;
            let z = random_matrix(n, d, 100 + trial);
            let fast = losses::decorrelation_loss(&z).unwrap();
            let brute = brute_force_decorr(&z);
            assert!(
                (fast - brute).abs() < 1e-8,
                "trial {trial}: {fast} vs brute {brute}"
            );
        }
        // hand-computed cases, exact
        let z = Matrix::from_rows(&[vec![1.0, 1.0], vec![-1.0, -1.0]]);
        assert_eq!(losses::decorrelation_loss(&z).unwrap(), 2.0);
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        assert_eq!(losses::decorrelation_loss(&z).unwrap(), 0.0);
        let z = Matrix::from_rows(&[vec![0.4], vec![-0.6], vec![0.1]]);
        assert_eq!(losses::decorrelation_loss(&z).unwrap(), 0.0);
    });
}

// ---------------------------------------------------------------------------
// Criterion: gradient fidelity.
// ---------------------------------------------------------------------------

fn check_rel(analytic: f64, fd: f64, what: &str) {
    let denom = analytic.abs().max(fd.abs()).max(1e-6);
    assert!(
        (analytic - fd).abs() / denom < 1e-3,
        "{what}: analytic {analytic} vs fd {fd}"
    );
}

fn fd_check_batch_grads(
    batch: &BatchFeatures,
    analytic: &losses::BatchGrads,
    eval: impl Fn(&BatchFeatures) -> f64,
    what: &str,
) {
    let h = 1e-6;
    let mats = [
        (&analytic.z_img, 0usize),
        (&analytic.z_dist, 1),
        (&analytic.z_text, 2),
        (&analytic.z_neg_img, 3),
        (&analytic.z_neg_dist, 4),
    ];
    for (gmat, mi) in mats {
        for e in 0..gmat.data.len() {
            let bump = |delta: f64| {
                let mut b = batch.clone();
                let m = match mi {
                    0 => &mut b.z_img,
                    1 => &mut b.z_dist,
                    2 => &mut b.z_text,
                    3 => &mut b.z_neg_img,
                    _ => &mut b.z_neg_dist,
                };
                m.data[e] += delta;
                eval(&b)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            check_rel(gmat.data[e], fd, &format!("{what}[matrix {mi}, {e}]"));
        }
    }
}

#[test]
fn gradient_fidelity() {
    criterion("gradient fidelity (losses + projector vs central FD)", 30.0, || {
        let batch = random_batch(4, 8, 500);

        // positive pair loss
        let g = losses::positive_loss_grads(&batch);
        fd_check_batch_grads(&batch, &g, losses::positive_loss, "positive");

        // margin negative loss (margin chosen so hinges straddle both sides)
        let m = 0.2;
        let g = losses::negative_loss_grads(&batch, m);
        fd_check_batch_grads(&batch, &g, |b| losses::negative_loss(b, m), "negative");

        // decorrelation loss
        let z = random_matrix(5, 7, 901);
        let g = losses::decorrelation_grad(&z).unwrap();
        let h = 1e-6;
        for e in 0..z.data.len() {
            let mut zp = z.clone();
            zp.data[e] += h;
            let mut zm = z.clone();
            zm.data[e] -= h;
            let fd = (losses::decorrelation_loss(&zp).unwrap()
                - losses::decorrelation_loss(&zm).unwrap())
                / (2.0 * h);
            check_rel(g.data[e], fd, &format!("decorr[{e}]"));
        }

        // hinge message loss on a d=16 toy
        let key = watermark::generate_key(11, 6, 16).unwrap();
        let mut r = rng::derive(2, "acc-msg", 0, 0);
        let msg = WatermarkMessage::random(6, &mut r);
        let phi: Vec<f64> = (0..16)
            .map(|_| rand::Rng::gen_range(&mut r, -0.3..0.3))
            .collect();
        let (_, grad) = watermark::message_loss_grad(&phi, &key, &msg, 0.1).unwrap();
        for i in 0..16 {
            let mut p = phi.clone();
            p[i] += h;
            let lp = watermark::message_loss(&p, &key, &msg, 0.1).unwrap();
            p[i] -= 2.0 * h;
            let lm = watermark::message_loss(&p, &key, &msg, 0.1).unwrap();
            check_rel(grad[i], (lp - lm) / (2.0 * h), &format!("message[{i}]"));
        }

        // projector forward on a 16-dim toy instance, eval mode
        let mut params = projector::init_params_with(ProjectorConfig::toy(16, 24, 20), 77);
        let x: Vec<f64> = (0..16)
            .map(|i| ((i as f64) * 0.37).sin())
            .collect();
        let c: Vec<f64> = (0..20).map(|i| ((i as f64) * 0.53).cos()).collect();
        let loss = |p: &projector::ProjectorParams, x: &[f64]| -> f64 {
            let (out, _) =
                projector::forward_cached(p, x, false, &mut rng::stream(0, "d")).unwrap();
            linalg::dot(&c, &out)
        };
        let (_, cache) =
            projector::forward_cached(&params, &x, false, &mut rng::stream(0, "d")).unwrap();
        let mut grads = projector::ParamGrads::zeros(&params.config);
        let g_x = projector::backward(&params, &cache, &c, &mut grads);
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            check_rel(
                g_x[i],
                (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * h),
                &format!("proj x[{i}]"),
            );
        }
        // strided FD over every parameter tensor
        let tensor_len = grads.views().map(|v| v.len());
        for t in 0..10 {
            let stride = (tensor_len[t] / 30).max(1);
            for i in (0..tensor_len[t]).step_by(stride) {
                let orig = get_param(&params, t, i);
                set_param(&mut params, t, i, orig + h as f32);
                let hi = get_param(&params, t, i) as f64;
                let lp = loss(&params, &x);
                set_param(&mut params, t, i, orig - h as f32);
                let lo = get_param(&params, t, i) as f64;
                let lm = loss(&params, &x);
                set_param(&mut params, t, i, orig);
                check_rel(
                    grads.views()[t][i],
                    (lp - lm) / (hi - lo),
                    &format!("proj tensor {t} [{i}]"),
                );
            }
        }
    });
}

fn get_param(p: &projector::ProjectorParams, t: usize, i: usize) -> f32 {
    let v: [&[f32]; 10] = [
        &p.w1, &p.b1, &p.ln1_gain, &p.ln1_bias, &p.w2, &p.b2, &p.ln2_gain, &p.ln2_bias, &p.w3,
        &p.b3,
    ];
    v[t][i]
}

fn set_param(p: &mut projector::ProjectorParams, t: usize, i: usize, val: f32) {
    let v: [&mut Vec<f32>; 10] = [
        &mut p.w1,
        &mut p.b1,
        &mut p.ln1_gain,
        &mut p.ln1_bias,
        &mut p.w2,
        &mut p.b2,
        &mut p.ln2_gain,
        &mut p.ln2_bias,
        &mut p.w3,
        &mut p.b3,
    ];
    *v[t].get_mut(i).unwrap() = val;
}

// ---------------------------------------------------------------------------
// Criterion: projector contract.
// ---------------------------------------------------------------------------

#[test]
fn projector_contract() {
    criterion("projector contract (unit norm + sample-wise batches)", 10.0, || {
        use rayon::prelude::*;
        // full-size head: 768 -> 2048 -> 2048 -> 4096
        let params = projector::init_params(1);
        let inputs: Vec<Vec<f64>> = (0..1000u64)
            .map(|s| {
                let mut r = rng::derive(s, "acc-proj-in", 0, 0);
                (0..768)
                    .map(|_| rand::Rng::gen_range(&mut r, -1.0..1.0))
                    .collect()
            })
            .collect();
        let worst = inputs
            .par_iter()
            .map(|x| {
                let (out, _) =
                    projector::forward_cached(&params, x, false, &mut rng::stream(0, "d"))
                        .unwrap();
                (linalg::norm(&out) - 1.0).abs()
            })
            .reduce(|| 0.0, f64::max);
        assert!(worst < 1e-5, "worst |norm - 1| = {worst:.2e}");

        // batch of size 1 equals the same sample inside a larger batch
        let toy = projector::init_params_with(ProjectorConfig::toy(16, 24, 20), 5);
        let xs: Vec<Vec<f64>> = (0..6)
            .map(|s| {
                let mut r = rng::derive(s, "acc-proj-batch", 0, 0);
                (0..16)
                    .map(|_| rand::Rng::gen_range(&mut r, -1.0..1.0))
                    .collect()
            })
            .collect();
        let in_batch = projector::project_batch(&toy, &xs, false, 0).unwrap();
        for (i, x) in xs.iter().enumerate() {
            let alone = projector::project_batch(&toy, &[x.clone()], false, 0).unwrap();
            assert_eq!(
                alone[0].values, in_batch[i].values,
                "sample {i} differs between batch sizes"
            );
        }
    });
}

// ---------------------------------------------------------------------------
// Criterion: hard-negative mining rule.
// ---------------------------------------------------------------------------

#[test]
fn hard_negative_mining_rule() {
    criterion("hard-negative mining rule (argmax above tau, uniform below)", 10.0, || {
        // constructed similarities: row 0 vs peers = (0.9, 0.1)
        let z = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.9, (1.0f64 - 0.81).sqrt(), 0.0],
            vec![0.1, 0.0, (1.0f64 - 0.01).sqrt()],
        ]);
        for tau in [0.5, 0.8] {
            let idx =
                losses::mine_hard_negatives(&z, tau, &mut rng::stream(1, "acc-mine")).unwrap();
            assert_eq!(idx[0], 1, "argmax must win when max 0.9 > tau {tau}");
        }
        let idx = losses::mine_hard_negatives(&z, 0.95, &mut rng::stream(1, "acc-mine")).unwrap();
        assert_ne!(idx[0], 0, "never the anchor itself");

        // below tau the choice is uniform over peers: frequency test within
        // 3 sigma over 10^4 draws
        let orth = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ]);
        let mut counts = [0usize; 4];
        let mut r = rng::stream(7, "acc-mine-freq");
        let trials = 10_000;
        for _ in 0..trials {
            let idx = losses::mine_hard_negatives(&orth, 0.8, &mut r).unwrap();
            counts[idx[0]] += 1;
        }
        assert_eq!(counts[0], 0);
        let p = 1.0 / 3.0;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        for &c in &counts[1..] {
            let rate = c as f64 / trials as f64;
            assert!(
                (rate - p).abs() < 3.0 * sigma,
                "rate {rate} vs uniform {p} (3 sigma = {:.4})",
                3.0 * sigma
            );
        }
    });
}

// ---------------------------------------------------------------------------
// Desk-scale watermark fixture shared by the round-trip and trend criteria.
// ---------------------------------------------------------------------------

struct WatermarkFixture {
    extractor: ProjectedExtractor,
    key: SecretKey,
    marked: Vec<(ImageTensor, WatermarkMessage)>,
    psnrs: Vec<f64>,
}

fn embed_config() -> EmbedConfig {
    EmbedConfig {
        mu_margin: 0.04,
        iterations: 100,
        ..Default::default()
    }
}

fn fixture() -> &'static WatermarkFixture {
    static FIXTURE: OnceLock<WatermarkFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        // freshly trained toy projector over the stub backbone
        let backbone = Arc::new(StubBackbone::new(3, 256).unwrap());
        let corpus = generate_synthetic_corpus(32, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let train_cfg = TrainConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 7,
            loss: LossConfig::default(),
            pipeline_seed: 11,
            checkpoint_dir: dir.path().to_path_buf(),
            max_steps: Some(4),
            grad_clip: 5.0,
        };
        let (params, _) = trainer::train(
            &corpus,
            backbone.as_ref(),
            ProjectorConfig::toy(256, 512, 256),
            &train_cfg,
        )
        .unwrap();
        let extractor =
            ProjectedExtractor::new(backbone as Arc<dyn Backbone>, params).unwrap();
        let key = watermark::generate_key(42, 10, 256).unwrap();

        let transforms = distortion::differentiable_transform_set();
        let cfg = embed_config();
        let images: Vec<ImageTensor> = generate_synthetic_items(52, 99)
            .unwrap()
            .into_iter()
            .skip(32)
            .map(|i| i.image)
            .collect();
        assert!(images.len() >= 20);
        let mut marked = Vec::new();
        let mut psnrs = Vec::new();
        for (i, img) in images.iter().enumerate() {
            let mut mr = rng::derive(1000, "probe-msg", i as u64, 0);
            let msg = WatermarkMessage::random(key.k, &mut mr);
            let (out, report) = watermark::embed(
                img,
                &key,
                &msg,
                &extractor,
                &transforms,
                &cfg,
                &mut rng::derive(2000, "probe-embed", i as u64, 0),
            )
            .unwrap();
            psnrs.push(report.psnr_db);
            marked.push((out, msg));
        }
        WatermarkFixture {
            extractor,
            key,
            marked,
            psnrs,
        }
    })
}

// ---------------------------------------------------------------------------
// Criterion: watermark round trip.
// ---------------------------------------------------------------------------

#[test]
fn watermark_round_trip() {
    criterion(
        "watermark round trip (k=10, PSNR 40, 100 iterations, 20 images)",
        300.0,
        || {
            let fx = fixture();
            assert!(fx.marked.len() >= 20);
            for (i, (marked, msg)) in fx.marked.iter().enumerate() {
                let decoded = watermark::extract(marked, &fx.key, &fx.extractor).unwrap();
                let acc = watermark::bit_accuracy(msg, &decoded).unwrap();
                assert_eq!(acc, 1.0, "image {i} decoded {decoded} expected {msg}");
                assert!(
                    fx.psnrs[i] >= 39.5,
                    "image {i} psnr {:.2} below the floor",
                    fx.psnrs[i]
                );
            }

            // wrong keys decode at chance: the binomial band over 50 keys
            let mut total = 0.0;
            let mut count = 0usize;
            for key_seed in 0..50u64 {
                let wrong = watermark::generate_key(9000 + key_seed, 10, 256).unwrap();
                let (marked, msg) = &fx.marked[(key_seed % 20) as usize];
                let decoded = watermark::extract(marked, &wrong, &fx.extractor).unwrap();
                total += watermark::bit_accuracy(msg, &decoded).unwrap();
                count += 1;
            }
            let mean = total / count as f64;
            assert!(
                (0.35..=0.65).contains(&mean),
                "wrong-key accuracy {mean} outside the chance band"
            );
        },
    );
}

// ---------------------------------------------------------------------------
// Criterion: robustness trend.
// ---------------------------------------------------------------------------

#[test]
fn robustness_trend() {
    criterion(
        "robustness trend (blur and crop degrade; no attack dominates)",
        600.0,
        || {
            let fx = fixture();
            let blur_cells: Vec<DistortionSpec> = [3usize, 7, 9]
                .iter()
                .map(|&k| {
                    let sigma = 0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8;
                    DistortionSpec::always(DistortionKind::GaussianBlur {
                        kernel: k,
                        sigma_min: sigma,
                        sigma_max: sigma,
                    })
                })
                .collect();
            let crop_cells: Vec<DistortionSpec> = [0.05f64, 0.10, 0.15]
                .iter()
                .map(|&f| DistortionSpec::always(DistortionKind::CropFraction { fraction: f }))
                .collect();

            let mean_acc = |spec: Option<&DistortionSpec>, tag: u64| -> f64 {
                let mut total = 0.0;
                for (i, (marked, msg)) in fx.marked.iter().enumerate() {
                    let input = match spec {
                        Some(s) => distortion::apply(
                            s,
                            marked,
                            &mut rng::derive(3000 + tag, "acc-attack", i as u64, 0),
                        )
                        .unwrap(),
                        None => marked.clone(),
                    };
                    let decoded = watermark::extract(&input, &fx.key, &fx.extractor).unwrap();
                    total += watermark::bit_accuracy(msg, &decoded).unwrap();
                }
                total / fx.marked.len() as f64
            };

            let none = mean_acc(None, 0);
            let blur: Vec<f64> = blur_cells
                .iter()
                .enumerate()
                .map(|(i, s)| mean_acc(Some(s), 10 + i as u64))
                .collect();
            let crop: Vec<f64> = crop_cells
                .iter()
                .enumerate()
                .map(|(i, s)| mean_acc(Some(s), 20 + i as u64))
                .collect();
            println!("  no attack: {none:.3}  blur k=3/7/9: {blur:.3?}  crop 5/10/15%: {crop:.3?}");

            for w in blur.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "blur trend not non-increasing: {blur:?}");
            }
            for w in crop.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "crop trend not non-increasing: {crop:?}");
            }
            for (name, cell) in blur.iter().enumerate().map(|(i, v)| (format!("blur[{i}]"), v)) {
                assert!(none >= *cell, "{name} exceeds the no-attack column");
            }
            for (name, cell) in crop.iter().enumerate().map(|(i, v)| (format!("crop[{i}]"), v)) {
                assert!(none >= *cell, "{name} exceeds the no-attack column");
            }
        },
    );
}

// ---------------------------------------------------------------------------
// Criterion: training efficacy.
// ---------------------------------------------------------------------------

#[test]
fn training_efficacy() {
    criterion(
        "training efficacy (50 steps on 64 synthetic images)",
        300.0,
        || {
            let backbone = StubBackbone::new(3, 256).unwrap();
            let corpus = generate_synthetic_corpus(64, 5).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let cfg = TrainConfig {
                epochs: 50,
                batch_size: 16,
                learning_rate: 1e-3,
                seed: 7,
                loss: LossConfig::default(),
                pipeline_seed: 11,
                checkpoint_dir: dir.path().to_path_buf(),
                max_steps: Some(50),
                grad_clip: 5.0,
            };
            let (_, metrics) = trainer::train(
                &corpus,
                &backbone,
                ProjectorConfig::toy(256, 512, 256),
                &cfg,
            )
            .unwrap();
            assert_eq!(metrics.final_step, 50);
            let first = metrics.steps.first().unwrap().total;
            let last = metrics.steps.last().unwrap().total;
            println!(
                "  loss {first:.4} -> {last:.4}, probe cos {:.4} -> {:.4}",
                metrics.probe_before, metrics.probe_after
            );
            assert!(last < first, "total loss did not decrease: {first} -> {last}");
            assert!(
                metrics.probe_after >= metrics.probe_before,
                "held-out clean<->distorted similarity decreased: {} -> {}",
                metrics.probe_before,
                metrics.probe_after
            );
            assert_eq!(
                metrics.backbone_hash_before, metrics.backbone_hash_after,
                "backbone weights changed"
            );
            // logged totals must equal the sum of their components
            for s in &metrics.steps {
                assert!(
                    (s.total - (s.pos + s.neg + cfg.loss.lambda_decorr * s.decorr)).abs() < 1e-6
                );
            }
        },
    );
}

// ---------------------------------------------------------------------------
// Criterion: CLI determinism.
// ---------------------------------------------------------------------------

#[test]
fn cli_determinism() {
    criterion(
        "determinism (repeated CLI runs are byte-identical)",
        300.0,
        || {
            let bin = env!("CARGO_BIN_EXE_anchormark");
            let dir = tempfile::tempdir().unwrap();
            let run = |args: &[&str]| {
                let out = Command::new(bin).args(args).output().unwrap();
                assert!(
                    out.status.success(),
                    "{}",
                    String::from_utf8_lossy(&out.stderr)
                );
            };

            // key files
            let k1 = dir.path().join("k1.bin");
            let k2 = dir.path().join("k2.bin");
            for k in [&k1, &k2] {
                run(&[
                    "keygen", "--seed", "9", "--k", "10", "--d", "512", "--out",
                    k.to_str().unwrap(),
                ]);
            }
            assert_eq!(std::fs::read(&k1).unwrap(), std::fs::read(&k2).unwrap());

            // checkpoints
            let t1 = dir.path().join("t1");
            let t2 = dir.path().join("t2");
            for t in [&t1, &t2] {
                run(&[
                    "train", "--seed", "4", "--data", "synth:6", "--backbone-dim", "32",
                    "--batch-size", "8", "--epochs", "1", "--max-steps", "2",
                    "--proj-hidden", "48", "--proj-out", "40", "--out-dir",
                    t.to_str().unwrap(),
                ]);
            }
            assert_eq!(
                std::fs::read(t1.join("final.ckpt")).unwrap(),
                std::fs::read(t2.join("final.ckpt")).unwrap()
            );
            assert_eq!(
                std::fs::read(t1.join("metrics.jsonl")).unwrap(),
                std::fs::read(t2.join("metrics.jsonl")).unwrap()
            );

            // reports
            let e1 = dir.path().join("e1");
            let e2 = dir.path().join("e2");
            for e in [&e1, &e2] {
                run(&[
                    "eval-invariance", "--seed", "3", "--data", "synth:4",
                    "--backbone-dim", "64", "--distortion", "rotation", "--strengths",
                    "5,30", "--out-dir", e.to_str().unwrap(),
                ]);
            }
            assert_eq!(
                std::fs::read(e1.join("invariance.csv")).unwrap(),
                std::fs::read(e2.join("invariance.csv")).unwrap()
            );
            assert_eq!(
                std::fs::read(e1.join("invariance-per-image.jsonl")).unwrap(),
                std::fs::read(e2.join("invariance-per-image.jsonl")).unwrap()
            );
        },
    );
}

// ---------------------------------------------------------------------------
// Opt-in criterion: real pretrained backbone wiring.
// ---------------------------------------------------------------------------

/// Needs the `clip` feature plus environment:
///   AM_CLIP_WEIGHTS    safetensors weights for the vit-l-14 dual encoder
///   AM_CLIP_TOKENIZER  tokenizer.json
///   AM_EVAL_IMAGES     directory holding at least 50 natural images
///
/// Run with:
///   cargo test -p anchormark --features clip --test acceptance -- --ignored
#[test]
#[ignore = "needs pretrained weights; see the doc comment"]
fn real_backbone_brightness_invariance() {
    criterion(
        "gated: raw 768-dim brightness invariance >= 0.90",
        1800.0,
        || {
            let weights = std::env::var("AM_CLIP_WEIGHTS");
            let tokenizer = std::env::var("AM_CLIP_TOKENIZER");
            let images_dir = std::env::var("AM_EVAL_IMAGES");
            let (Ok(weights), Ok(tokenizer), Ok(images_dir)) =
                (weights, tokenizer, images_dir)
            else {
                eprintln!(
                    "skipping: set AM_CLIP_WEIGHTS, AM_CLIP_TOKENIZER, AM_EVAL_IMAGES to run"
                );
                return;
            };
            #[cfg(not(feature = "clip"))]
            {
                let _ = (weights, tokenizer, images_dir);
                panic!("rebuild with --features clip to run the gated criterion");
            }
            #[cfg(feature = "clip")]
            {
                let opts = anchormark::backbone::BackboneOpts {
                    seed: 0,
                    dim: None,
                    weights: Some(weights.into()),
                    tokenizer: Some(tokenizer.into()),
                };
                let bb: Arc<dyn Backbone> =
                    Arc::from(anchormark::backbone::create("vit-l-14", &opts).unwrap());
                assert_eq!(bb.descriptor().image_dim, 768);
                let ex = anchormark::extractor::RawExtractor::new(bb);
                let mut paths: Vec<std::path::PathBuf> = std::fs::read_dir(&images_dir)
                    .unwrap()
                    .filter_map(|e| e.ok())
                    .map(|e| e.path())
                    .filter(|p| {
                        p.extension().is_some_and(|x| {
                            let x = x.to_string_lossy().to_lowercase();
                            x == "png" || x == "jpg" || x == "jpeg"
                        })
                    })
                    .collect();
                paths.sort();
                assert!(paths.len() >= 50, "need at least 50 images");
                let images: Vec<ImageTensor> = paths[..50]
                    .iter()
                    .map(|p| imageio::load_image(p, 224).unwrap())
                    .collect();
                let suite = vec![(
                    "brightness".to_string(),
                    DistortionSpec::always(DistortionKind::Brightness { factor: 1.3 }),
                )];
                let rep = anchormark::evaluation::invariance_sweep(&images, &ex, &suite, &[], 1)
                    .unwrap();
                let mean = rep.rows[0].value;
                println!("  brightness 0.3 mean cosine over 50 images: {mean:.4}");
                assert!(mean >= 0.90, "mean cosine {mean} below 0.90");
            }
        },
    );
}
