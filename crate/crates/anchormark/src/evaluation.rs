//! Evaluation protocols: invariance cosine-similarity sweeps, cross-extractor
//! comparison, linear-probe classification under distortion, and watermark
//! robustness grids.
//!
//! Every report keeps the per-image values it aggregated, so each row's mean
//! is recomputable from the emitted log. Per-image work parallelizes;
//! aggregation is a deterministic fold in image order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::distortion::{self, DistortionSpec};
use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::imageio::ImageTensor;
use crate::linalg;
use crate::rng;
use crate::watermark::{self, EmbedConfig, SecretKey, WatermarkMessage};

/// One aggregate report row; the CSV schema is
/// `section,metric,distortion,strength,value,std,n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub section: String,
    pub metric: String,
    pub distortion: String,
    pub strength: f64,
    pub value: f64,
    pub std: f64,
    pub n: usize,
}

/// One per-image record; emitted as line-delimited JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerImageRecord {
    pub section: String,
    pub metric: String,
    pub image: usize,
    pub distortion: String,
    pub strength: f64,
    pub value: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone)]
pub struct InvarianceReport {
    pub rows: Vec<ReportRow>,
    pub per_image: Vec<PerImageRecord>,
}

pub type RobustnessReport = GridReport;

#[derive(Debug, Clone)]
pub struct GridReport {
    pub rows: Vec<ReportRow>,
    pub per_image: Vec<PerImageRecord>,
    /// (image index, error message) for images whose embedding failed.
    pub failures: Vec<(usize, String)>,
}

/// Cosine similarity between clean and distorted features for each suite
/// entry, swept over `strengths` (empty: each entry at its own parameters).
pub fn invariance_sweep(
    images: &[ImageTensor],
    extractor: &dyn FeatureExtractor,
    suite: &[(String, DistortionSpec)],
    strengths: &[f64],
    seed: u64,
) -> Result<InvarianceReport> {
    sweep_section("eval-invariance", "cosine_sim", images, extractor, suite, strengths, seed)
}

fn sweep_section(
    section: &str,
    metric: &str,
    images: &[ImageTensor],
    extractor: &dyn FeatureExtractor,
    suite: &[(String, DistortionSpec)],
    strengths: &[f64],
    seed: u64,
) -> Result<InvarianceReport> {
    if images.is_empty() {
        return Err(Error::Argument("invariance sweep needs images".into()));
    }
    if suite.is_empty() {
        return Err(Error::Argument("invariance sweep needs distortions".into()));
    }
    let clean: Vec<Vec<f64>> = images
        .par_iter()
        .map(|img| extractor.features(img))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut per_image = Vec::new();
    for (entry_idx, (name, base)) in suite.iter().enumerate() {
        let cells: Vec<(f64, DistortionSpec)> = if strengths.is_empty() {
            vec![(base.canonical_strength(), base.clone())]
        } else {
            strengths.iter().map(|&s| (s, base.with_strength(s))).collect()
        };
        for (strength_idx, (strength, spec)) in cells.iter().enumerate() {
            let values: Vec<f64> = images
                .par_iter()
                .enumerate()
                .map(|(i, img)| -> Result<f64> {
                    let mut r = rng::derive(
                        seed,
                        "eval-distort",
                        (entry_idx * 1000 + strength_idx) as u64,
                        i as u64,
                    );
                    let distorted = distortion::apply(spec, img, &mut r)?;
                    let f = extractor.features(&distorted)?;
                    Ok(linalg::dot(&clean[i], &f)
                        / (linalg::norm(&clean[i]) * linalg::norm(&f)))
                })
                .collect::<Result<_>>()?;
            for (i, v) in values.iter().enumerate() {
                per_image.push(PerImageRecord {
                    section: section.into(),
                    metric: metric.into(),
                    image: i,
                    distortion: name.clone(),
                    strength: *strength,
                    value: *v,
                });
            }
            let (mean, std) = mean_std(&values);
            rows.push(ReportRow {
                section: section.into(),
                metric: metric.into(),
                distortion: name.clone(),
                strength: *strength,
                value: mean,
                std,
                n: values.len(),
            });
        }
    }
    Ok(InvarianceReport { rows, per_image })
}

/// Same metric as [`invariance_sweep`] computed per registered extractor;
/// the extractor name lands in the metric column.
pub fn compare_extractors(
    images: &[ImageTensor],
    extractors: &[(String, &dyn FeatureExtractor)],
    grid: &[(String, DistortionSpec)],
    seed: u64,
) -> Result<InvarianceReport> {
    if extractors.is_empty() {
        return Err(Error::Argument("compare needs at least one extractor".into()));
    }
    let mut rows = Vec::new();
    let mut per_image = Vec::new();
    for (name, extractor) in extractors {
        let report = sweep_section("eval-compare", name, images, *extractor, grid, &[], seed)?;
        rows.extend(report.rows);
        per_image.extend(report.per_image);
    }
    Ok(InvarianceReport { rows, per_image })
}

const PROBE_ITERS: usize = 300;
const PROBE_LR: f64 = 1.0;

/// Fit one affine classification layer by softmax cross-entropy on clean
/// training features (fixed-budget full-batch gradient descent), then
/// evaluate accuracy on the clean test set and on each distorted variant.
pub fn linear_probe(
    train: &[(ImageTensor, usize)],
    test: &[(ImageTensor, usize)],
    extractor: &dyn FeatureExtractor,
    distortions: &[(String, DistortionSpec)],
    seed: u64,
) -> Result<InvarianceReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Argument("linear probe needs train and test sets".into()));
    }
    let classes = train.iter().map(|(_, l)| *l).max().unwrap() + 1;
    for c in 0..classes {
        if !train.iter().any(|(_, l)| *l == c) {
            return Err(Error::Argument(format!(
                "class {c} absent from the training set"
            )));
        }
    }
    let d = extractor.dim();
    let feats: Vec<Vec<f64>> = train
        .par_iter()
        .map(|(img, _)| extractor.features(img))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = train.iter().map(|(_, l)| *l).collect();

    // zero-initialized affine head, deterministic full-batch descent
    let mut w = vec![0.0f64; classes * d];
    let mut b = vec![0.0f64; classes];
    let n = feats.len() as f64;
    for _ in 0..PROBE_ITERS {
        let mut gw = vec![0.0f64; classes * d];
        let mut gb = vec![0.0f64; classes];
        for (f, &y) in feats.iter().zip(&labels) {
            let mut logits: Vec<f64> = (0..classes)
                .map(|c| linalg::dot(&w[c * d..(c + 1) * d], f) + b[c])
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in &mut logits {
                *l = (*l - max).exp();
                z += *l;
            }
            for c in 0..classes {
                let p = logits[c] / z;
                let err = p - if c == y { 1.0 } else { 0.0 };
                linalg::axpy(&mut gw[c * d..(c + 1) * d], err / n, f);
                gb[c] += err / n;
            }
        }
        linalg::axpy(&mut w, -PROBE_LR, &gw);
        linalg::axpy(&mut b, -PROBE_LR, &gb);
    }

    let classify = |f: &[f64]| -> usize {
        let mut best = (f64::NEG_INFINITY, 0);
        for c in 0..classes {
            let logit = linalg::dot(&w[c * d..(c + 1) * d], f) + b[c];
            if logit > best.0 {
                best = (logit, c);
            }
        }
        best.1
    };

    let mut cells: Vec<(String, f64, Option<DistortionSpec>)> =
        vec![("none".into(), 0.0, None)];
    for (name, spec) in distortions {
        cells.push((name.clone(), spec.canonical_strength(), Some(spec.clone())));
    }

    let mut rows = Vec::new();
    let mut per_image = Vec::new();
    for (cell_idx, (name, strength, spec)) in cells.iter().enumerate() {
        let hits: Vec<f64> = test
            .par_iter()
            .enumerate()
            .map(|(i, (img, label))| -> Result<f64> {
                let input = match spec {
                    Some(s) => {
                        let mut r =
                            rng::derive(seed, "probe-distort", cell_idx as u64, i as u64);
                        distortion::apply(s, img, &mut r)?
                    }
                    None => img.clone(),
                };
                let f = extractor.features(&input)?;
                Ok(if classify(&f) == *label { 1.0 } else { 0.0 })
            })
            .collect::<Result<_>>()?;
        for (i, v) in hits.iter().enumerate() {
            per_image.push(PerImageRecord {
                section: "eval-linear".into(),
                metric: "accuracy".into(),
                image: i,
                distortion: name.clone(),
                strength: *strength,
                value: *v,
            });
        }
        let (mean, std) = mean_std(&hits);
        rows.push(ReportRow {
            section: "eval-linear".into(),
            metric: "accuracy".into(),
            distortion: name.clone(),
            strength: *strength,
            value: mean,
            std,
            n: hits.len(),
        });
    }
    Ok(InvarianceReport { rows, per_image })
}

/// Embed one message per image, attack with every grid cell, extract, and
/// aggregate bit accuracy per cell. Embedding failures are reported per
/// image and the grid continues without them.
pub fn robustness_grid(
    images: &[ImageTensor],
    key: &SecretKey,
    messages: &[WatermarkMessage],
    extractor: &dyn FeatureExtractor,
    grid: &[(String, DistortionSpec)],
    cfg: &EmbedConfig,
    seed: u64,
) -> Result<GridReport> {
    if images.is_empty() {
        return Err(Error::Argument("robustness grid needs images".into()));
    }
    if messages.len() != 1 && messages.len() != images.len() {
        return Err(Error::Argument(format!(
            "need one message per image or one broadcast message, got {} for {} images",
            messages.len(),
            images.len()
        )));
    }
    let transforms = distortion::differentiable_transform_set();

    struct PerImage {
        index: usize,
        accuracies: Vec<f64>, // "none" first, then grid order
    }

    let outcomes: Vec<std::result::Result<PerImage, (usize, String)>> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let msg = if messages.len() == 1 {
                &messages[0]
            } else {
                &messages[i]
            };
            let mut embed_rng = rng::derive(seed, "robustness-embed", i as u64, 0);
            let (marked, _report) = watermark::embed(
                img,
                key,
                msg,
                extractor,
                &transforms,
                cfg,
                &mut embed_rng,
            )
            .map_err(|e| (i, e.to_string()))?;
            let mut accuracies = Vec::with_capacity(grid.len() + 1);
            let decoded =
                watermark::extract(&marked, key, extractor).map_err(|e| (i, e.to_string()))?;
            accuracies.push(
                watermark::bit_accuracy(msg, &decoded).map_err(|e| (i, e.to_string()))?,
            );
            for (cell_idx, (_, spec)) in grid.iter().enumerate() {
                let mut r = rng::derive(seed, "robustness-attack", cell_idx as u64, i as u64);
                let attacked =
                    distortion::apply(spec, &marked, &mut r).map_err(|e| (i, e.to_string()))?;
                let decoded = watermark::extract(&attacked, key, extractor)
                    .map_err(|e| (i, e.to_string()))?;
                accuracies.push(
                    watermark::bit_accuracy(msg, &decoded).map_err(|e| (i, e.to_string()))?,
                );
            }
            Ok(PerImage {
                index: i,
                accuracies,
            })
        })
        .collect();

    let mut successes = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(p) => successes.push(p),
            Err(f) => failures.push(f),
        }
    }
    if successes.is_empty() {
        return Err(Error::Numeric(format!(
            "every embedding failed; first: {}",
            failures
                .first()
                .map(|(_, m)| m.clone())
                .unwrap_or_default()
        )));
    }

    let mut cell_names: Vec<(String, f64)> = vec![("none".into(), 0.0)];
    for (name, spec) in grid {
        cell_names.push((name.clone(), spec.canonical_strength()));
    }

    let mut rows = Vec::new();
    let mut per_image = Vec::new();
    for (cell, (name, strength)) in cell_names.iter().enumerate() {
        let values: Vec<f64> = successes.iter().map(|p| p.accuracies[cell]).collect();
        for p in &successes {
            per_image.push(PerImageRecord {
                section: "eval-robustness".into(),
                metric: "bit_accuracy".into(),
                image: p.index,
                distortion: name.clone(),
                strength: *strength,
                value: p.accuracies[cell],
            });
        }
        let (mean, std) = mean_std(&values);
        rows.push(ReportRow {
            section: "eval-robustness".into(),
            metric: "bit_accuracy".into(),
            distortion: name.clone(),
            strength: *strength,
            value: mean,
            std,
            n: values.len(),
        });
    }
    Ok(GridReport {
        rows,
        per_image,
        failures,
    })
}

// ---------------------------------------------------------------------------
// CSV / JSONL emission.
// ---------------------------------------------------------------------------

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut out = String::from("section,metric,distortion,strength,value,std,n\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{}\n",
            r.section, r.metric, r.distortion, r.strength, r.value, r.std, r.n
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(Error::Config(format!(
                "{}:{}: expected 7 CSV columns",
                path.display(),
                lineno + 1
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Config(format!("{}: bad number {s:?}", path.display())))
        };
        rows.push(ReportRow {
            section: parts[0].into(),
            metric: parts[1].into(),
            distortion: parts[2].into(),
            strength: parse(parts[3])?,
            value: parse(parts[4])?,
            std: parse(parts[5])?,
            n: parts[6]
                .parse()
                .map_err(|_| Error::Config(format!("{}: bad n {:?}", path.display(), parts[6])))?,
        });
    }
    Ok(rows)
}

pub fn write_per_image_jsonl(path: &Path, records: &[PerImageRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(
            &serde_json::to_string(r).map_err(|e| Error::Config(format!("jsonl: {e}")))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
