//! End-to-end projector training over a frozen backbone: pairing, distortion
//! application, batching, hard-negative wiring, adaptive-moment updates,
//! checkpointing, and metric logging.
//!
//! All randomness derives from `(seed, purpose, epoch/step)` streams, so a
//! run is a pure function of its config and split runs (train, then resume)
//! reproduce straight runs exactly.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::distortion::DistortionPipeline;
use crate::error::{Error, Result};
use crate::imageio::CaptionedSample;
use crate::linalg::{self, Matrix};
use crate::losses::{self, BatchFeatures, LossConfig};
use crate::projector::{self, Container, ForwardCache, ParamGrads, ProjectorConfig, ProjectorParams};
use crate::rng;

fn default_batch_size() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-4
}
fn default_grad_clip() -> f64 {
    5.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub pipeline_seed: u64,
    pub checkpoint_dir: PathBuf,
    /// Stop after this many optimization steps regardless of epochs.
    #[serde(default)]
    pub max_steps: Option<u64>,
    /// Global gradient-norm clip guarding the exp terms early in training.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Argument(
                "batch_size must be >= 2 (mining requires a peer)".into(),
            ));
        }
        if self.learning_rate <= 0.0 || self.learning_rate.is_nan() {
            return Err(Error::Argument("learning_rate must be > 0".into()));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub total: f64,
    pub pos: f64,
    pub neg: f64,
    pub decorr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub probe_mean_cos: f64,
    /// Checkpoint file name within the run directory.
    pub checkpoint: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainMetrics {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Held-out clean<->distorted mean cosine before the first step of this
    /// run and after the last.
    pub probe_before: f64,
    pub probe_after: f64,
    pub backbone_hash_before: u64,
    pub backbone_hash_after: u64,
    pub final_step: u64,
}

/// One sample's projected features plus the caches needed for backward.
struct SampleForward {
    z_img: Vec<f64>,
    z_dist: Vec<f64>,
    z_text: Vec<f64>,
    cache_img: ForwardCache,
    cache_dist: ForwardCache,
    cache_text: ForwardCache,
}

struct TrainingBatch {
    features: BatchFeatures,
    forwards: Vec<SampleForward>,
    neg_forwards: Vec<ForwardCache>,
    neg_indices: Vec<usize>,
}

/// Encode, distort, project, and mine one batch. `epoch`/`step` seed the
/// distortion draws, dropout masks, and mining stream.
#[allow(clippy::too_many_arguments)]
fn build_batch(
    samples: &[&CaptionedSample],
    pipeline: &DistortionPipeline,
    backbone: &dyn Backbone,
    params: &ProjectorParams,
    cfg: &TrainConfig,
    epoch: usize,
    step: u64,
    training_mode: bool,
) -> Result<TrainingBatch> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Argument(format!(
            "batch needs at least 2 samples, got {n}"
        )));
    }
    let mut forwards = Vec::with_capacity(n);
    for (i, sample) in samples.iter().enumerate() {
        let draw_base = step * (2 * cfg.batch_size as u64) + 2 * i as u64;
        let distorted = pipeline.apply(&sample.image, draw_base)?;
        let x_img = backbone.encode_image(&sample.image)?.values;
        let x_dist = backbone.encode_image(&distorted)?.values;
        let x_text = backbone.encode_text(&sample.caption)?.values;
        let fwd = |x: &[f64], slot: u64| {
            let mut drop_rng = rng::derive(cfg.seed, "dropout", step, i as u64 * 4 + slot);
            projector::forward_cached(params, x, training_mode, &mut drop_rng)
        };
        let (z_img, cache_img) = fwd(&x_img, 0)?;
        let (z_dist, cache_dist) = fwd(&x_dist, 1)?;
        let (z_text, cache_text) = fwd(&x_text, 2)?;
        forwards.push(SampleForward {
            z_img,
            z_dist,
            z_text,
            cache_img,
            cache_dist,
            cache_text,
        });
    }

    let d = params.config.output_dim;
    let mut z_img = Matrix::zeros(n, d);
    let mut z_dist = Matrix::zeros(n, d);
    let mut z_text = Matrix::zeros(n, d);
    for (i, f) in forwards.iter().enumerate() {
        z_img.row_mut(i).copy_from_slice(&f.z_img);
        z_dist.row_mut(i).copy_from_slice(&f.z_dist);
        z_text.row_mut(i).copy_from_slice(&f.z_text);
    }

    // hard negatives on projected clean-image features
    let mut mine_rng = rng::derive(cfg.seed, "mine", step, epoch as u64);
    let neg_indices = losses::mine_hard_negatives(&z_img, cfg.loss.tau_hard_negative, &mut mine_rng)?;

    // negative's clean projection is row n_i; its distorted variant gets an
    // independent pipeline draw
    let mut z_neg_img = Matrix::zeros(n, d);
    let mut z_neg_dist = Matrix::zeros(n, d);
    let mut neg_forwards = Vec::with_capacity(n);
    for (i, &ni) in neg_indices.iter().enumerate() {
        z_neg_img.row_mut(i).copy_from_slice(&forwards[ni].z_img);
        let draw = step * (2 * cfg.batch_size as u64) + 2 * i as u64 + 1;
        let neg_distorted = pipeline.apply(&samples[ni].image, draw)?;
        let x = backbone.encode_image(&neg_distorted)?.values;
        let mut drop_rng = rng::derive(cfg.seed, "dropout", step, i as u64 * 4 + 3);
        let (z, cache) = projector::forward_cached(params, &x, training_mode, &mut drop_rng)?;
        z_neg_dist.row_mut(i).copy_from_slice(&z);
        neg_forwards.push(cache);
    }

    Ok(TrainingBatch {
        features: BatchFeatures::from_parts_unchecked(z_img, z_dist, z_text, z_neg_img, z_neg_dist),
        forwards,
        neg_forwards,
        neg_indices,
    })
}

/// Public batch constructor: encode clean/distorted/caption, project, mine
/// hard negatives, and attach the negatives' clean and independently
/// distorted projections.
pub fn make_training_batch(
    samples: &[&CaptionedSample],
    pipeline: &DistortionPipeline,
    backbone: &dyn Backbone,
    params: &ProjectorParams,
    cfg: &TrainConfig,
) -> Result<BatchFeatures> {
    let batch = build_batch(samples, pipeline, backbone, params, cfg, 0, 0, true)?;
    Ok(batch.features)
}

// ---------------------------------------------------------------------------
// Adam over the ten parameter tensors, moments stored f32 so checkpoints
// restore the optimizer exactly.
// ---------------------------------------------------------------------------

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn zeros(cfg: &ProjectorConfig) -> Self {
        let sizes = [
            cfg.hidden_dim * cfg.input_dim,
            cfg.hidden_dim,
            cfg.hidden_dim,
            cfg.hidden_dim,
            cfg.hidden_dim * cfg.hidden_dim,
            cfg.hidden_dim,
            cfg.hidden_dim,
            cfg.hidden_dim,
            cfg.output_dim * cfg.hidden_dim,
            cfg.output_dim,
        ];
        Adam {
            m: sizes.iter().map(|s| vec![0.0; *s]).collect(),
            v: sizes.iter().map(|s| vec![0.0; *s]).collect(),
        }
    }

    fn update(&mut self, params: &mut ProjectorParams, grads: &ParamGrads, lr: f64, t: u64) {
        let views = grads.views();
        let tensors: [&mut Vec<f32>; 10] = [
            &mut params.w1,
            &mut params.b1,
            &mut params.ln1_gain,
            &mut params.ln1_bias,
            &mut params.w2,
            &mut params.b2,
            &mut params.ln2_gain,
            &mut params.ln2_bias,
            &mut params.w3,
            &mut params.b3,
        ];
        let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
        for (ti, tensor) in tensors.into_iter().enumerate() {
            let g = views[ti];
            let m = &mut self.m[ti];
            let v = &mut self.v[ti];
            for i in 0..tensor.len() {
                let m64 = ADAM_BETA1 * m[i] as f64 + (1.0 - ADAM_BETA1) * g[i];
                let v64 = ADAM_BETA2 * v[i] as f64 + (1.0 - ADAM_BETA2) * g[i] * g[i];
                m[i] = m64 as f32;
                v[i] = v64 as f32;
                let mh = m[i] as f64 / bc1;
                let vh = v[i] as f64 / bc2;
                tensor[i] = (tensor[i] as f64 - lr * mh / (vh.sqrt() + ADAM_EPS)) as f32;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Probe split and metric.
// ---------------------------------------------------------------------------

/// Seeded 10% held-out split: (train, probe).
fn split_corpus(
    corpus: &[CaptionedSample],
    seed: u64,
) -> (Vec<&CaptionedSample>, Vec<&CaptionedSample>) {
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    let mut r = rng::stream(seed, "probe-split");
    for i in (1..idx.len()).rev() {
        let j = rand::Rng::gen_range(&mut r, 0..=i);
        idx.swap(i, j);
    }
    let n_probe = (corpus.len() / 10).max(1).min(corpus.len() - 1);
    let probe = idx[..n_probe].iter().map(|&i| &corpus[i]).collect();
    let train = idx[n_probe..].iter().map(|&i| &corpus[i]).collect();
    (train, probe)
}

/// Mean clean<->distorted cosine similarity of projected features over the
/// probe set (eval mode, fixed distortion draws).
fn probe_similarity(
    probe: &[&CaptionedSample],
    pipeline: &DistortionPipeline,
    backbone: &dyn Backbone,
    params: &ProjectorParams,
) -> Result<f64> {
    let mut acc = 0.0;
    for (i, sample) in probe.iter().enumerate() {
        let distorted = DistortionPipeline {
            specs: pipeline.specs.clone(),
            rng_seed: pipeline.rng_seed ^ 0x9e37_79b9_7f4a_7c15,
        }
        .apply(&sample.image, i as u64)?;
        let clean = backbone.encode_image(&sample.image)?.values;
        let dist = backbone.encode_image(&distorted)?.values;
        let mut r = rng::stream(0, "probe-eval");
        let (z_clean, _) = projector::forward_cached(params, &clean, false, &mut r)?;
        let (z_dist, _) = projector::forward_cached(params, &dist, false, &mut r)?;
        acc += linalg::dot(&z_clean, &z_dist);
    }
    Ok(acc / probe.len() as f64)
}

// ---------------------------------------------------------------------------
// Checkpointing.
// ---------------------------------------------------------------------------

fn adam_array_names() -> [&'static str; 10] {
    [
        "w1", "b1", "ln1_gain", "ln1_bias", "w2", "b2", "ln2_gain", "ln2_bias", "w3", "b3",
    ]
}

fn save_checkpoint(
    path: &Path,
    params: &ProjectorParams,
    adam: &Adam,
    step: u64,
    next_epoch: usize,
) -> Result<()> {
    let meta = serde_json::json!({
        "format": "projector",
        "config": params.config,
        "extra": { "step": step, "next_epoch": next_epoch },
    });
    let mut arrays: Vec<(String, Vec<usize>, Vec<f32>)> = params
        .arrays()
        .into_iter()
        .map(|(n, s, d)| (n.to_string(), s, d.to_vec()))
        .collect();
    for (ti, name) in adam_array_names().iter().enumerate() {
        arrays.push((
            format!("adam_m_{name}"),
            vec![adam.m[ti].len()],
            adam.m[ti].clone(),
        ));
        arrays.push((
            format!("adam_v_{name}"),
            vec![adam.v[ti].len()],
            adam.v[ti].clone(),
        ));
    }
    projector::write_container(path, &Container { meta, arrays })
}

struct LoadedCheckpoint {
    params: ProjectorParams,
    adam: Adam,
    step: u64,
    next_epoch: usize,
}

fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let container = projector::read_container(path)?;
    let params = projector::params_from_container(&container, path)?;
    let extra = container
        .meta
        .get("extra")
        .cloned()
        .unwrap_or(serde_json::Value::Null);
    let step = extra.get("step").and_then(|v| v.as_u64()).unwrap_or(0);
    let next_epoch = extra
        .get("next_epoch")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as usize;
    let mut adam = Adam::zeros(&params.config);
    for (ti, name) in adam_array_names().iter().enumerate() {
        if let Some((_, data)) = container.array(&format!("adam_m_{name}")) {
            if data.len() != adam.m[ti].len() {
                return Err(Error::Checkpoint(format!(
                    "{}: adam_m_{name} has {} values, expected {}",
                    path.display(),
                    data.len(),
                    adam.m[ti].len()
                )));
            }
            adam.m[ti].copy_from_slice(data);
        }
        if let Some((_, data)) = container.array(&format!("adam_v_{name}")) {
            adam.v[ti].copy_from_slice(data);
        }
    }
    Ok(LoadedCheckpoint {
        params,
        adam,
        step,
        next_epoch,
    })
}

// ---------------------------------------------------------------------------
// The training loop.
// ---------------------------------------------------------------------------

struct RunState {
    params: ProjectorParams,
    adam: Adam,
    step: u64,
    start_epoch: usize,
}

fn run_training(
    corpus: &[CaptionedSample],
    backbone: &dyn Backbone,
    cfg: &TrainConfig,
    mut state: RunState,
) -> Result<(ProjectorParams, TrainMetrics)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Argument("corpus is empty".into()));
    }
    std::fs::create_dir_all(&cfg.checkpoint_dir)
        .map_err(|e| Error::io(&cfg.checkpoint_dir, e))?;
    let metrics_path = cfg.checkpoint_dir.join("metrics.jsonl");
    let mut metrics_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;

    let pipeline = crate::distortion::training_pipeline(cfg.pipeline_seed);
    let (train_set, probe_set) = split_corpus(corpus, cfg.seed);
    if train_set.len() < 2 {
        return Err(Error::Argument(
            "corpus too small: need at least 2 training samples after the probe split".into(),
        ));
    }
    let effective_batch = cfg.batch_size.min(train_set.len());

    let hash_before = backbone.params_hash();
    let probe_before = probe_similarity(&probe_set, &pipeline, backbone, &state.params)?;

    let mut last_good = cfg.checkpoint_dir.join("init.ckpt");
    save_checkpoint(&last_good, &state.params, &state.adam, state.step, state.start_epoch)?;

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut stop = false;

    for epoch in state.start_epoch..cfg.epochs {
        if stop {
            break;
        }
        // seeded per-epoch shuffle
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng = rng::derive(cfg.seed, "shuffle", epoch as u64, 0);
        for i in (1..order.len()).rev() {
            let j = rand::Rng::gen_range(&mut shuffle_rng, 0..=i);
            order.swap(i, j);
        }

        for chunk in order.chunks(effective_batch) {
            if chunk.len() < 2 {
                continue; // remainder too small to mine a negative
            }
            if let Some(max) = cfg.max_steps {
                if state.step >= max {
                    stop = true;
                    break;
                }
            }
            let samples: Vec<&CaptionedSample> = chunk.iter().map(|&i| train_set[i]).collect();
            let batch = build_batch(
                &samples,
                &pipeline,
                backbone,
                &state.params,
                cfg,
                epoch,
                state.step,
                true,
            )?;
            let (breakdown, g) = losses::total_loss_with_grads(&batch.features, &cfg.loss)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Diverged {
                    step: state.step,
                    checkpoint: last_good.clone(),
                });
            }

            let mut grads = ParamGrads::zeros(&state.params.config);
            for (i, fwd) in batch.forwards.iter().enumerate() {
                // clean-image projections also feed every sample that mined
                // this row as its negative
                let mut up_img = g.z_img.row(i).to_vec();
                for (j, &nj) in batch.neg_indices.iter().enumerate() {
                    if nj == i {
                        linalg::axpy(&mut up_img, 1.0, g.z_neg_img.row(j));
                    }
                }
                projector::backward(&state.params, &fwd.cache_img, &up_img, &mut grads);
                projector::backward(&state.params, &fwd.cache_dist, g.z_dist.row(i), &mut grads);
                projector::backward(&state.params, &fwd.cache_text, g.z_text.row(i), &mut grads);
                projector::backward(
                    &state.params,
                    &batch.neg_forwards[i],
                    g.z_neg_dist.row(i),
                    &mut grads,
                );
            }

            let gnorm = grads.global_norm();
            if !gnorm.is_finite() {
                return Err(Error::Diverged {
                    step: state.step,
                    checkpoint: last_good.clone(),
                });
            }
            if gnorm > cfg.grad_clip {
                grads.scale(cfg.grad_clip / gnorm);
            }
            state.step += 1;
            state
                .adam
                .update(&mut state.params, &grads, cfg.learning_rate, state.step);

            let record = StepRecord {
                step: state.step,
                epoch,
                total: breakdown.total,
                pos: breakdown.pos,
                neg: breakdown.neg,
                decorr: breakdown.decorr,
            };
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::Config(format!("metrics serialize: {e}")))?;
            writeln!(metrics_file, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
            steps.push(record);
        }

        let ckpt = cfg.checkpoint_dir.join(format!("epoch_{:04}.ckpt", epoch + 1));
        save_checkpoint(&ckpt, &state.params, &state.adam, state.step, epoch + 1)?;
        last_good = ckpt.clone();
        let probe_cos = probe_similarity(&probe_set, &pipeline, backbone, &state.params)?;
        let record = EpochRecord {
            epoch,
            probe_mean_cos: probe_cos,
            checkpoint: ckpt
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Config(format!("metrics serialize: {e}")))?;
        writeln!(metrics_file, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        epochs.push(record);
    }

    let probe_after = probe_similarity(&probe_set, &pipeline, backbone, &state.params)?;
    let final_path = cfg.checkpoint_dir.join("final.ckpt");
    save_checkpoint(&final_path, &state.params, &state.adam, state.step, cfg.epochs)?;

    let metrics = TrainMetrics {
        steps,
        epochs,
        probe_before,
        probe_after,
        backbone_hash_before: hash_before,
        backbone_hash_after: backbone.params_hash(),
        final_step: state.step,
    };
    Ok((state.params, metrics))
}

/// Train a fresh projector; the backbone stays frozen (its parameter hash is
/// recorded before and after).
pub fn train(
    corpus: &[CaptionedSample],
    backbone: &dyn Backbone,
    proj_cfg: ProjectorConfig,
    cfg: &TrainConfig,
) -> Result<(ProjectorParams, TrainMetrics)> {
    if proj_cfg.input_dim != backbone.descriptor().image_dim {
        return Err(Error::Dimension(format!(
            "projector input dim {} != backbone image dim {}",
            proj_cfg.input_dim,
            backbone.descriptor().image_dim
        )));
    }
    let params = projector::init_params_with(proj_cfg, cfg.seed);
    let adam = Adam::zeros(&proj_cfg);
    run_training(
        corpus,
        backbone,
        cfg,
        RunState {
            params,
            adam,
            step: 0,
            start_epoch: 0,
        },
    )
}

/// Continue training from a checkpoint: restores parameters, optimizer
/// moments, and the step/epoch counters.
pub fn resume(
    checkpoint: &Path,
    corpus: &[CaptionedSample],
    backbone: &dyn Backbone,
    cfg: &TrainConfig,
) -> Result<(ProjectorParams, TrainMetrics)> {
    let loaded = load_checkpoint(checkpoint)?;
    run_training(
        corpus,
        backbone,
        cfg,
        RunState {
            params: loaded.params,
            adam: loaded.adam,
            step: loaded.step,
            start_epoch: loaded.next_epoch,
        },
    )
}
