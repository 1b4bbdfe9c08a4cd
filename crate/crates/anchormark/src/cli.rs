//! Command-line entry point: train, keygen, wm-embed, wm-extract, attack,
//! the eval-* protocols, and report rendering.
//!
//! Flags override environment (`AM_*`), which overrides the config file,
//! which overrides defaults. All randomness funnels through `--seed`; every
//! run writes a resolved-config snapshot next to its outputs.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::backbone::{self, Backbone, BackboneOpts};
use crate::config::RunConfig;
use crate::distortion::{self, DistortionSpec};
use crate::error::{Error, Result};
use crate::evaluation::{self, write_per_image_jsonl, write_report_csv};
use crate::extractor::{FeatureExtractor, ProjectedExtractor, RawExtractor};
use crate::imageio::{self, CaptionedSample, ImageTensor};
use crate::projector::ProjectorConfig;
use crate::report;
use crate::trainer::{self, TrainConfig};
use crate::watermark::{self, EmbedConfig, WatermarkMessage};
use crate::rng;

#[derive(Parser, Debug)]
#[command(
    name = "anchormark",
    version,
    about = "Text-anchored invariant features and multi-bit image watermarking"
)]
struct Cli {
    /// TOML config file supplying defaults for all sections.
    #[arg(long, global = true, env = "AM_CONFIG")]
    config: Option<PathBuf>,

    /// Master seed; every random stream derives from it.
    #[arg(long, global = true, env = "AM_SEED")]
    seed: Option<u64>,

    /// Worker threads for per-image parallelism.
    #[arg(long, global = true, env = "AM_JOBS")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct BackboneArgs {
    /// Backbone adapter: stub | vit-l-14.
    #[arg(long, env = "AM_BACKBONE")]
    backbone: Option<String>,

    /// Feature dimension override (stub only).
    #[arg(long, env = "AM_BACKBONE_DIM")]
    backbone_dim: Option<usize>,

    /// Seed for the stub's fixed random maps.
    #[arg(long, env = "AM_BACKBONE_SEED")]
    backbone_seed: Option<u64>,

    /// Safetensors weights for pretrained adapters.
    #[arg(long, env = "AM_BACKBONE_WEIGHTS")]
    backbone_weights: Option<PathBuf>,

    /// Tokenizer file for pretrained adapters.
    #[arg(long, env = "AM_BACKBONE_TOKENIZER")]
    backbone_tokenizer: Option<PathBuf>,

    /// Projector checkpoint; when given, features are projected.
    #[arg(long, env = "AM_CKPT")]
    ckpt: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Data source: `synth:<n>` or an image directory.
    #[arg(long, env = "AM_DATA")]
    data: Option<String>,

    /// Captions file for directory sources (Flickr8k token format).
    #[arg(long, env = "AM_CAPTIONS")]
    captions: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the projector over a frozen backbone.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        backbone: BackboneArgs,
        #[arg(long, env = "AM_EPOCHS")]
        epochs: Option<usize>,
        #[arg(long, env = "AM_BATCH_SIZE")]
        batch_size: Option<usize>,
        #[arg(long, env = "AM_LR")]
        learning_rate: Option<f64>,
        #[arg(long, env = "AM_PIPELINE_SEED")]
        pipeline_seed: Option<u64>,
        #[arg(long, env = "AM_MAX_STEPS")]
        max_steps: Option<u64>,
        #[arg(long, env = "AM_PROJ_HIDDEN")]
        proj_hidden: Option<usize>,
        #[arg(long, env = "AM_PROJ_OUT")]
        proj_out: Option<usize>,
        /// Resume from this checkpoint instead of initializing fresh.
        #[arg(long, env = "AM_RESUME")]
        resume: Option<PathBuf>,
        /// Also export the synthetic corpus (PNGs + captions) here.
        #[arg(long, env = "AM_DUMP_CORPUS")]
        dump_corpus: Option<PathBuf>,
        #[arg(long, env = "AM_OUT_DIR")]
        out_dir: PathBuf,
    },
    /// Generate a secret key file.
    Keygen {
        /// Message bits carried by the key.
        #[arg(long, env = "AM_K")]
        k: usize,
        /// Feature-space dimension.
        #[arg(long, env = "AM_D")]
        d: usize,
        #[arg(long, env = "AM_OUT")]
        out: PathBuf,
    },
    /// Embed a message into an image.
    WmEmbed {
        #[arg(long, env = "AM_IMAGE")]
        image: PathBuf,
        #[arg(long, env = "AM_KEY")]
        key: PathBuf,
        /// Bitstring, e.g. 1011001010.
        #[arg(long, env = "AM_MESSAGE")]
        message: String,
        #[arg(long, env = "AM_OUT")]
        out: PathBuf,
        #[command(flatten)]
        backbone: BackboneArgs,
        #[arg(long, env = "AM_ITERATIONS")]
        iterations: Option<usize>,
        #[arg(long, env = "AM_PSNR")]
        psnr: Option<f64>,
        #[arg(long, env = "AM_LAMBDA")]
        lambda: Option<f64>,
        #[arg(long, env = "AM_MU")]
        mu: Option<f64>,
        #[arg(long, env = "AM_STEP_SIZE")]
        step_size: Option<f64>,
    },
    /// Extract a message from an image; prints the bitstring.
    WmExtract {
        #[arg(long, env = "AM_IMAGE")]
        image: PathBuf,
        #[arg(long, env = "AM_KEY")]
        key: PathBuf,
        #[command(flatten)]
        backbone: BackboneArgs,
    },
    /// Apply a named attack-grid (or test-suite) distortion to an image.
    Attack {
        #[arg(long, env = "AM_IMAGE")]
        image: PathBuf,
        /// Cell name, e.g. blur_k3, crop_10pct, rotation_6, jpeg_compression.
        #[arg(long, env = "AM_NAME")]
        name: String,
        /// Optional strength override (kind-specific scalar).
        #[arg(long, env = "AM_STRENGTH")]
        strength: Option<f64>,
        #[arg(long, env = "AM_OUT")]
        out: PathBuf,
    },
    /// Clean-vs-distorted cosine similarity sweeps.
    EvalInvariance {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        backbone: BackboneArgs,
        /// Restrict the suite to one distortion name.
        #[arg(long, env = "AM_DISTORTION")]
        distortion: Option<String>,
        /// Comma-separated strengths to sweep.
        #[arg(long, env = "AM_STRENGTHS", value_delimiter = ',')]
        strengths: Vec<f64>,
        /// Cap on evaluated images.
        #[arg(long, env = "AM_IMAGES")]
        images: Option<usize>,
        #[arg(long, env = "AM_OUT_DIR")]
        out_dir: PathBuf,
    },
    /// The same metric across several extractors.
    EvalCompare {
        #[command(flatten)]
        data: DataArgs,
        /// Repeatable `name=spec` where spec is `<backbone>[+<ckpt>]` and
        /// backbone is `stub[:seed[:dim]]` or `vit-l-14`.
        #[arg(long = "extractor", env = "AM_EXTRACTOR", value_delimiter = ';')]
        extractors: Vec<String>,
        /// Distortion grid: test | attack | a JSON grid file.
        #[arg(long, env = "AM_GRID", default_value = "test")]
        grid: String,
        #[arg(long, env = "AM_IMAGES")]
        images: Option<usize>,
        #[arg(long, env = "AM_OUT_DIR")]
        out_dir: PathBuf,
    },
    /// Linear-probe classification on frozen features under distortion.
    EvalLinear {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        backbone: BackboneArgs,
        /// Fraction of the labeled set used for training.
        #[arg(long, env = "AM_TRAIN_FRAC", default_value_t = 0.8)]
        train_frac: f64,
        #[arg(long, env = "AM_OUT_DIR")]
        out_dir: PathBuf,
    },
    /// Watermark bit accuracy under the attack grid.
    EvalRobustness {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        backbone: BackboneArgs,
        #[arg(long, env = "AM_KEY")]
        key: PathBuf,
        /// Broadcast message; defaults to seeded random per-image messages.
        #[arg(long, env = "AM_MESSAGE")]
        message: Option<String>,
        /// Grid: attack | test | a JSON grid file.
        #[arg(long, env = "AM_GRID", default_value = "attack")]
        grid: String,
        #[arg(long, env = "AM_IMAGES")]
        images: Option<usize>,
        #[arg(long, env = "AM_ITERATIONS")]
        iterations: Option<usize>,
        #[arg(long, env = "AM_PSNR")]
        psnr: Option<f64>,
        #[arg(long, env = "AM_MU")]
        mu: Option<f64>,
        #[arg(long, env = "AM_OUT_DIR")]
        out_dir: PathBuf,
    },
    /// Render markdown tables and curve CSVs from evaluation outputs.
    Report {
        #[arg(long, env = "AM_RESULTS")]
        results: PathBuf,
        #[arg(long, env = "AM_OUT_DIR")]
        out_dir: PathBuf,
    },
}

/// Entry point used by `main` and by tests; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        // results are order-deterministic regardless of worker count
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Train {
            data,
            backbone,
            epochs,
            batch_size,
            learning_rate,
            pipeline_seed,
            max_steps,
            proj_hidden,
            proj_out,
            resume,
            dump_corpus,
            out_dir,
        } => cmd_train(
            cfg,
            data,
            backbone,
            epochs,
            batch_size,
            learning_rate,
            pipeline_seed,
            max_steps,
            proj_hidden,
            proj_out,
            resume,
            dump_corpus,
            out_dir,
        ),
        Command::Keygen { k, d, out } => cmd_keygen(cfg, k, d, out),
        Command::WmEmbed {
            image,
            key,
            message,
            out,
            backbone,
            iterations,
            psnr,
            lambda,
            mu,
            step_size,
        } => cmd_wm_embed(
            cfg, image, key, message, out, backbone, iterations, psnr, lambda, mu, step_size,
        ),
        Command::WmExtract {
            image,
            key,
            backbone,
        } => cmd_wm_extract(cfg, image, key, backbone),
        Command::Attack {
            image,
            name,
            strength,
            out,
        } => cmd_attack(cfg, image, name, strength, out),
        Command::EvalInvariance {
            data,
            backbone,
            distortion,
            strengths,
            images,
            out_dir,
        } => cmd_eval_invariance(cfg, data, backbone, distortion, strengths, images, out_dir),
        Command::EvalCompare {
            data,
            extractors,
            grid,
            images,
            out_dir,
        } => cmd_eval_compare(cfg, data, extractors, grid, images, out_dir),
        Command::EvalLinear {
            data,
            backbone,
            train_frac,
            out_dir,
        } => cmd_eval_linear(cfg, data, backbone, train_frac, out_dir),
        Command::EvalRobustness {
            data,
            backbone,
            key,
            message,
            grid,
            images,
            iterations,
            psnr,
            mu,
            out_dir,
        } => cmd_eval_robustness(
            cfg, data, backbone, key, message, grid, images, iterations, psnr, mu, out_dir,
        ),
        Command::Report { results, out_dir } => {
            let rendered = report::render(&results, &out_dir)?;
            println!(
                "report: {} ({} sections, {} curve files)",
                rendered.markdown_path.display(),
                rendered.sections,
                rendered.curve_files.len()
            );
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// Shared resolution helpers.
// ---------------------------------------------------------------------------

fn apply_backbone_flags(cfg: &mut RunConfig, args: &BackboneArgs) {
    if let Some(name) = &args.backbone {
        cfg.backbone.name = name.clone();
    }
    if let Some(dim) = args.backbone_dim {
        cfg.backbone.dim = Some(dim);
    }
    if let Some(seed) = args.backbone_seed {
        cfg.backbone.seed = seed;
    }
    if let Some(w) = &args.backbone_weights {
        cfg.backbone.weights = Some(w.clone());
    }
    if let Some(t) = &args.backbone_tokenizer {
        cfg.backbone.tokenizer = Some(t.clone());
    }
}

fn build_backbone(cfg: &RunConfig) -> Result<Arc<dyn Backbone>> {
    let opts = BackboneOpts {
        seed: cfg.backbone.seed,
        dim: cfg.backbone.dim,
        weights: cfg.backbone.weights.clone(),
        tokenizer: cfg.backbone.tokenizer.clone(),
    };
    Ok(Arc::from(backbone::create(&cfg.backbone.name, &opts)?))
}

fn build_extractor(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
) -> Result<(Arc<dyn Backbone>, Box<dyn FeatureExtractor>)> {
    let bb = build_backbone(cfg)?;
    let ex: Box<dyn FeatureExtractor> = match ckpt {
        Some(path) => {
            let params = crate::projector::load_params(path)?;
            Box::new(ProjectedExtractor::new(bb.clone(), params)?)
        }
        None => Box::new(RawExtractor::new(bb.clone())),
    };
    Ok((bb, ex))
}

enum Source {
    Synth(usize),
    Dir(PathBuf),
}

fn parse_source(cfg: &RunConfig, flag: &Option<String>) -> Result<Source> {
    let source = flag
        .clone()
        .or_else(|| cfg.data.source.clone())
        .ok_or_else(|| Error::Config("no data source; pass --data synth:<n> or a directory".into()))?;
    if let Some(n) = source.strip_prefix("synth:") {
        let n: usize = n
            .parse()
            .map_err(|_| Error::Config(format!("bad synth count in --data {source:?}")))?;
        Ok(Source::Synth(n))
    } else {
        Ok(Source::Dir(PathBuf::from(source)))
    }
}

fn load_corpus(cfg: &RunConfig, data: &DataArgs) -> Result<Vec<CaptionedSample>> {
    match parse_source(cfg, &data.data)? {
        Source::Synth(n) => imageio::generate_synthetic_corpus(n, cfg.seed),
        Source::Dir(dir) => {
            let captions = data
                .captions
                .clone()
                .or_else(|| cfg.data.captions.clone())
                .unwrap_or_else(|| dir.join("captions.txt"));
            let load = imageio::load_captioned_corpus(&dir, &captions)?;
            if !load.skipped.is_empty() {
                eprintln!(
                    "warning: skipped {} caption(s) referencing missing images",
                    load.skipped.len()
                );
            }
            Ok(load.samples)
        }
    }
}

fn load_images(cfg: &RunConfig, data: &DataArgs, limit: Option<usize>) -> Result<Vec<ImageTensor>> {
    let images = match parse_source(cfg, &data.data)? {
        Source::Synth(n) => imageio::generate_synthetic_items(n, cfg.seed)?
            .into_iter()
            .map(|i| i.image)
            .collect::<Vec<_>>(),
        Source::Dir(dir) => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
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
            let mut out = Vec::new();
            for p in paths {
                out.push(imageio::load_image(&p, imageio::WORKING_SIZE)?);
            }
            out
        }
    };
    match limit {
        Some(n) => Ok(images.into_iter().take(n).collect()),
        None => Ok(images),
    }
}

fn named_grid(spec: &str) -> Result<Vec<(String, DistortionSpec)>> {
    match spec {
        "attack" => Ok(distortion::attack_grid()),
        "test" => Ok(distortion::test_suite()),
        path => distortion::load_grid(Path::new(path)),
    }
}

// ---------------------------------------------------------------------------
// Subcommands.
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    mut cfg: RunConfig,
    data: DataArgs,
    backbone_args: BackboneArgs,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    pipeline_seed: Option<u64>,
    max_steps: Option<u64>,
    proj_hidden: Option<usize>,
    proj_out: Option<usize>,
    resume: Option<PathBuf>,
    dump_corpus: Option<PathBuf>,
    out_dir: PathBuf,
) -> Result<()> {
    apply_backbone_flags(&mut cfg, &backbone_args);
    if let Some(v) = epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = pipeline_seed {
        cfg.train.pipeline_seed = v;
    }
    if max_steps.is_some() {
        cfg.train.max_steps = max_steps;
    }
    if let Some(v) = proj_hidden {
        cfg.train.proj_hidden = v;
    }
    if let Some(v) = proj_out {
        cfg.train.proj_out = v;
    }
    if let Some(src) = &data.data {
        cfg.data.source = Some(src.clone());
    }

    let corpus = load_corpus(&cfg, &data)?;
    if let Some(dir) = &dump_corpus {
        if let Source::Synth(n) = parse_source(&cfg, &data.data)? {
            let items = imageio::generate_synthetic_items(n, cfg.seed)?;
            imageio::write_corpus(&items, dir)?;
            println!("corpus: exported {} images to {}", items.len(), dir.display());
        }
    }
    let bb = build_backbone(&cfg)?;
    let train_cfg = TrainConfig {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        learning_rate: cfg.train.learning_rate,
        seed: cfg.seed,
        loss: cfg.loss,
        pipeline_seed: cfg.train.pipeline_seed,
        checkpoint_dir: out_dir.clone(),
        max_steps: cfg.train.max_steps,
        grad_clip: 5.0,
    };
    let proj_cfg = ProjectorConfig {
        input_dim: bb.descriptor().image_dim,
        hidden_dim: cfg.train.proj_hidden,
        output_dim: cfg.train.proj_out,
        dropout: cfg.train.dropout,
    };
    cfg.write_snapshot(&out_dir.join("run-config.toml"), "train")?;
    let (_, metrics) = match &resume {
        Some(ckpt) => trainer::resume(ckpt, &corpus, bb.as_ref(), &train_cfg)?,
        None => trainer::train(&corpus, bb.as_ref(), proj_cfg, &train_cfg)?,
    };
    assert_eq!(
        metrics.backbone_hash_before, metrics.backbone_hash_after,
        "backbone weights changed during training"
    );
    let first = metrics.steps.first().map(|s| s.total).unwrap_or(f64::NAN);
    let last = metrics.steps.last().map(|s| s.total).unwrap_or(f64::NAN);
    println!(
        "train: {} steps, loss {first:.4} -> {last:.4}, probe cos {:.4} -> {:.4}",
        metrics.final_step, metrics.probe_before, metrics.probe_after
    );
    println!("checkpoint: {}", out_dir.join("final.ckpt").display());
    Ok(())
}

fn cmd_keygen(cfg: RunConfig, k: usize, d: usize, out: PathBuf) -> Result<()> {
    let key = watermark::generate_key(cfg.seed, k, d)?;
    watermark::save_key(&key, &out)?;
    cfg.write_snapshot(&snapshot_path(&out), "keygen")?;
    println!("key: k={k} d={d} seed={} -> {}", cfg.seed, out.display());
    Ok(())
}

fn snapshot_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".run-config.toml");
    out.with_file_name(name)
}

#[allow(clippy::too_many_arguments)]
fn cmd_wm_embed(
    mut cfg: RunConfig,
    image: PathBuf,
    key_path: PathBuf,
    message: String,
    out: PathBuf,
    backbone_args: BackboneArgs,
    iterations: Option<usize>,
    psnr: Option<f64>,
    lambda: Option<f64>,
    mu: Option<f64>,
    step_size: Option<f64>,
) -> Result<()> {
    apply_backbone_flags(&mut cfg, &backbone_args);
    if let Some(v) = iterations {
        cfg.embed.iterations = v;
    }
    if let Some(v) = psnr {
        cfg.embed.target_psnr_db = v;
    }
    if let Some(v) = lambda {
        cfg.embed.lambda_w = v;
    }
    if let Some(v) = mu {
        cfg.embed.mu_margin = v;
    }
    if let Some(v) = step_size {
        cfg.embed.step_size = v;
    }
    let (_, ex) = build_extractor(&cfg, backbone_args.ckpt.as_deref())?;
    let key = watermark::load_key(&key_path)?;
    let msg = WatermarkMessage::from_bitstring(&message)?;
    let img = imageio::load_image(&image, ex.input_size())?;
    let embed_cfg = EmbedConfig {
        lambda_w: cfg.embed.lambda_w,
        mu_margin: cfg.embed.mu_margin,
        iterations: cfg.embed.iterations,
        step_size: cfg.embed.step_size,
        budget: imageio::PerturbationBudget::new(cfg.embed.target_psnr_db)?,
    };
    let mut r = rng::derive(cfg.seed, "cli-embed", 0, 0);
    let (marked, rep) = watermark::embed(&img, &key, &msg, ex.as_ref(), &distortion::differentiable_transform_set(), &embed_cfg, &mut r)?;
    // hold the budget on the 8-bit lattice the PNG will carry
    let quantized = watermark::quantize_to_budget(&marked, &img, &embed_cfg.budget)?;
    let file_psnr = imageio::psnr(&img, &quantized)?;
    quantized.save_png(&out)?;
    cfg.write_snapshot(&snapshot_path(&out), "wm-embed")?;
    println!(
        "embedded: {} bits, psnr {:.2} dB{} -> {}",
        key.k,
        file_psnr,
        if rep.warning { " (objective not reduced)" } else { "" },
        out.display()
    );
    Ok(())
}

fn cmd_wm_extract(
    mut cfg: RunConfig,
    image: PathBuf,
    key_path: PathBuf,
    backbone_args: BackboneArgs,
) -> Result<()> {
    apply_backbone_flags(&mut cfg, &backbone_args);
    let (_, ex) = build_extractor(&cfg, backbone_args.ckpt.as_deref())?;
    let key = watermark::load_key(&key_path)?;
    let img = imageio::load_image(&image, ex.input_size())?;
    let decoded = watermark::extract(&img, &key, ex.as_ref())?;
    println!("{decoded}");
    Ok(())
}

fn cmd_attack(
    cfg: RunConfig,
    image: PathBuf,
    name: String,
    strength: Option<f64>,
    out: PathBuf,
) -> Result<()> {
    let mut grid = distortion::attack_grid();
    grid.extend(distortion::test_suite());
    let (_, spec) = grid
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| {
            let names: Vec<&str> = grid.iter().map(|(n, _)| n.as_str()).collect();
            Error::Argument(format!(
                "unknown attack {name:?}; available: {}",
                names.join(", ")
            ))
        })?;
    let spec = match strength {
        Some(s) => spec.with_strength(s),
        None => spec.clone(),
    };
    let img = imageio::load_image(&image, imageio::WORKING_SIZE)?;
    let mut r = rng::derive(cfg.seed, "cli-attack", 0, 0);
    let attacked = distortion::apply(&spec, &img, &mut r)?;
    attacked.save_png(&out)?;
    cfg.write_snapshot(&snapshot_path(&out), "attack")?;
    println!("attacked: {name} -> {}", out.display());
    Ok(())
}

fn cmd_eval_invariance(
    mut cfg: RunConfig,
    data: DataArgs,
    backbone_args: BackboneArgs,
    distortion_filter: Option<String>,
    strengths: Vec<f64>,
    images: Option<usize>,
    out_dir: PathBuf,
) -> Result<()> {
    apply_backbone_flags(&mut cfg, &backbone_args);
    let (_, ex) = build_extractor(&cfg, backbone_args.ckpt.as_deref())?;
    let imgs = load_images(&cfg, &data, images)?;
    let mut suite = distortion::test_suite();
    if let Some(name) = &distortion_filter {
        suite.retain(|(n, _)| n == name);
        if suite.is_empty() {
            return Err(Error::Argument(format!(
                "distortion {name:?} is not in the test suite"
            )));
        }
    }
    let rep = evaluation::invariance_sweep(&imgs, ex.as_ref(), &suite, &strengths, cfg.seed)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    write_report_csv(&out_dir.join("invariance.csv"), &rep.rows)?;
    write_per_image_jsonl(&out_dir.join("invariance-per-image.jsonl"), &rep.per_image)?;
    cfg.write_snapshot(&out_dir.join("run-config.toml"), "eval-invariance")?;
    for r in &rep.rows {
        println!(
            "{}\tstrength {}\tcos {:.4} ± {:.4} (n={})",
            r.distortion, r.strength, r.value, r.std, r.n
        );
    }
    Ok(())
}

/// `name=spec` with spec `<backbone>[+<ckpt>]`, backbone `stub[:seed[:dim]]`
/// or a registry name.
fn parse_extractor_spec(
    cfg: &RunConfig,
    item: &str,
) -> Result<(String, Box<dyn FeatureExtractor>)> {
    let (name, spec) = item
        .split_once('=')
        .ok_or_else(|| Error::Argument(format!("--extractor {item:?}: expected name=spec")))?;
    let (bb_spec, ckpt) = match spec.split_once('+') {
        Some((b, c)) => (b, Some(PathBuf::from(c))),
        None => (spec, None),
    };
    let mut parts = bb_spec.split(':');
    let bb_name = parts.next().unwrap_or_default();
    let seed = parts
        .next()
        .map(|s| s.parse::<u64>())
        .transpose()
        .map_err(|_| Error::Argument(format!("bad seed in extractor spec {item:?}")))?
        .unwrap_or(cfg.backbone.seed);
    let dim = parts
        .next()
        .map(|s| s.parse::<usize>())
        .transpose()
        .map_err(|_| Error::Argument(format!("bad dim in extractor spec {item:?}")))?
        .or(cfg.backbone.dim);
    let opts = BackboneOpts {
        seed,
        dim,
        weights: cfg.backbone.weights.clone(),
        tokenizer: cfg.backbone.tokenizer.clone(),
    };
    let bb: Arc<dyn Backbone> = Arc::from(backbone::create(bb_name, &opts)?);
    let ex: Box<dyn FeatureExtractor> = match ckpt {
        Some(path) => Box::new(ProjectedExtractor::new(
            bb,
            crate::projector::load_params(&path)?,
        )?),
        None => Box::new(RawExtractor::new(bb)),
    };
    Ok((name.to_string(), ex))
}

fn cmd_eval_compare(
    cfg: RunConfig,
    data: DataArgs,
    extractor_specs: Vec<String>,
    grid: String,
    images: Option<usize>,
    out_dir: PathBuf,
) -> Result<()> {
    if extractor_specs.is_empty() {
        return Err(Error::Argument(
            "eval-compare needs at least one --extractor name=spec".into(),
        ));
    }
    let imgs = load_images(&cfg, &data, images)?;
    let built: Vec<(String, Box<dyn FeatureExtractor>)> = extractor_specs
        .iter()
        .map(|s| parse_extractor_spec(&cfg, s))
        .collect::<Result<_>>()?;
    let named: Vec<(String, &dyn FeatureExtractor)> = built
        .iter()
        .map(|(n, e)| (n.clone(), e.as_ref()))
        .collect();
    let grid = named_grid(&grid)?;
    let rep = evaluation::compare_extractors(&imgs, &named, &grid, cfg.seed)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    write_report_csv(&out_dir.join("compare.csv"), &rep.rows)?;
    write_per_image_jsonl(&out_dir.join("compare-per-image.jsonl"), &rep.per_image)?;
    cfg.write_snapshot(&out_dir.join("run-config.toml"), "eval-compare")?;
    for r in &rep.rows {
        println!(
            "{}\t{}\tcos {:.4} (n={})",
            r.metric, r.distortion, r.value, r.n
        );
    }
    Ok(())
}

fn cmd_eval_linear(
    mut cfg: RunConfig,
    data: DataArgs,
    backbone_args: BackboneArgs,
    train_frac: f64,
    out_dir: PathBuf,
) -> Result<()> {
    apply_backbone_flags(&mut cfg, &backbone_args);
    if !(0.0 < train_frac && train_frac < 1.0) {
        return Err(Error::Argument("--train-frac must lie in (0,1)".into()));
    }
    let n = match parse_source(&cfg, &data.data)? {
        Source::Synth(n) => n,
        Source::Dir(_) => {
            return Err(Error::Argument(
                "eval-linear needs labeled data; use --data synth:<n>".into(),
            ))
        }
    };
    let items = imageio::generate_synthetic_items(n, cfg.seed)?;
    // stratified split so every shape class appears in training
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut per_class: Vec<Vec<(ImageTensor, usize)>> =
        vec![Vec::new(); imageio::SYNTHETIC_CLASSES];
    for item in items {
        per_class[item.class].push((item.image, item.class));
    }
    for bucket in per_class {
        let cut = ((bucket.len() as f64) * train_frac).ceil() as usize;
        for (i, pair) in bucket.into_iter().enumerate() {
            if i < cut {
                train.push(pair);
            } else {
                test.push(pair);
            }
        }
    }
    if test.is_empty() {
        return Err(Error::Argument(
            "test split is empty; lower --train-frac or raise the corpus size".into(),
        ));
    }
    let (_, ex) = build_extractor(&cfg, backbone_args.ckpt.as_deref())?;
    use distortion::DistortionKind::*;
    let distortions: Vec<(String, DistortionSpec)> = vec![
        ("rotation_10".into(), DistortionSpec::always(Rotation { min_deg: 10.0, max_deg: 10.0 })),
        ("rotation_20".into(), DistortionSpec::always(Rotation { min_deg: 20.0, max_deg: 20.0 })),
        ("brightness_1.3".into(), DistortionSpec::always(Brightness { factor: 1.3 })),
        ("brightness_1.5".into(), DistortionSpec::always(Brightness { factor: 1.5 })),
        ("contrast_1.3".into(), DistortionSpec::always(Contrast { factor: 1.3 })),
        ("contrast_1.5".into(), DistortionSpec::always(Contrast { factor: 1.5 })),
        ("blur_k1".into(), DistortionSpec::always(GaussianBlur { kernel: 1, sigma_min: 0.8, sigma_max: 0.8 })),
        ("blur_k3".into(), DistortionSpec::always(GaussianBlur { kernel: 3, sigma_min: 0.8, sigma_max: 0.8 })),
    ];
    let rep = evaluation::linear_probe(&train, &test, ex.as_ref(), &distortions, cfg.seed)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    write_report_csv(&out_dir.join("linear.csv"), &rep.rows)?;
    write_per_image_jsonl(&out_dir.join("linear-per-image.jsonl"), &rep.per_image)?;
    cfg.write_snapshot(&out_dir.join("run-config.toml"), "eval-linear")?;
    for r in &rep.rows {
        println!("{}\taccuracy {:.4} (n={})", r.distortion, r.value, r.n);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval_robustness(
    mut cfg: RunConfig,
    data: DataArgs,
    backbone_args: BackboneArgs,
    key_path: PathBuf,
    message: Option<String>,
    grid: String,
    images: Option<usize>,
    iterations: Option<usize>,
    psnr: Option<f64>,
    mu: Option<f64>,
    out_dir: PathBuf,
) -> Result<()> {
    apply_backbone_flags(&mut cfg, &backbone_args);
    if let Some(v) = iterations {
        cfg.embed.iterations = v;
    }
    if let Some(v) = psnr {
        cfg.embed.target_psnr_db = v;
    }
    if let Some(v) = mu {
        cfg.embed.mu_margin = v;
    }
    let (_, ex) = build_extractor(&cfg, backbone_args.ckpt.as_deref())?;
    let key = watermark::load_key(&key_path)?;
    let imgs = load_images(&cfg, &data, images.or(Some(20)))?;
    let messages: Vec<WatermarkMessage> = match &message {
        Some(bits) => vec![WatermarkMessage::from_bitstring(bits)?],
        None => (0..imgs.len())
            .map(|i| {
                WatermarkMessage::random(key.k, &mut rng::derive(cfg.seed, "robust-msg", i as u64, 0))
            })
            .collect(),
    };
    let grid = named_grid(&grid)?;
    let embed_cfg = EmbedConfig {
        lambda_w: cfg.embed.lambda_w,
        mu_margin: cfg.embed.mu_margin,
        iterations: cfg.embed.iterations,
        step_size: cfg.embed.step_size,
        budget: imageio::PerturbationBudget::new(cfg.embed.target_psnr_db)?,
    };
    let rep = evaluation::robustness_grid(
        &imgs, &key, &messages, ex.as_ref(), &grid, &embed_cfg, cfg.seed,
    )?;
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    write_report_csv(&out_dir.join("robustness.csv"), &rep.rows)?;
    write_per_image_jsonl(&out_dir.join("robustness-per-image.jsonl"), &rep.per_image)?;
    cfg.write_snapshot(&out_dir.join("run-config.toml"), "eval-robustness")?;
    for (idx, err) in &rep.failures {
        eprintln!("warning: image {idx} embedding failed: {err}");
    }
    for r in &rep.rows {
        println!(
            "{}\tbit accuracy {:.4} (n={})",
            r.distortion, r.value, r.n
        );
    }
    Ok(())
}
