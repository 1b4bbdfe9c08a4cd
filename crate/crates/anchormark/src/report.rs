//! Render evaluation outputs into markdown tables plus per-curve CSV files
//! (strength vs value) for external plotting. Regeneration from the same
//! inputs is byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluation::{read_report_csv, ReportRow};

pub struct RenderedReport {
    pub markdown_path: PathBuf,
    pub curve_files: Vec<PathBuf>,
    pub sections: usize,
}

/// Collect `*.csv` report files under `results_dir` (sorted), group rows by
/// (section, metric), and write `report.md` plus `curves/*.csv` into
/// `out_dir`.
pub fn render(results_dir: &Path, out_dir: &Path) -> Result<RenderedReport> {
    let mut csv_paths: Vec<PathBuf> = std::fs::read_dir(results_dir)
        .map_err(|e| Error::io(results_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    csv_paths.sort();
    if csv_paths.is_empty() {
        return Err(Error::Argument(format!(
            "no evaluation CSV files found in {}; run an eval-* subcommand first",
            results_dir.display()
        )));
    }

    let mut rows: Vec<ReportRow> = Vec::new();
    for p in &csv_paths {
        rows.extend(read_report_csv(p)?);
    }

    // group by (section, metric), keep row order within a group
    let mut groups: BTreeMap<(String, String), Vec<ReportRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.section.clone(), r.metric.clone()))
            .or_default()
            .push(r);
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let curves_dir = out_dir.join("curves");
    std::fs::create_dir_all(&curves_dir).map_err(|e| Error::io(&curves_dir, e))?;

    let mut md = String::from("# Evaluation report\n");
    let mut curve_files = Vec::new();
    for ((section, metric), rows) in &groups {
        let _ = writeln!(md, "\n## {section} — {metric}\n");
        let _ = writeln!(md, "| distortion | strength | {metric} | std | n |");
        let _ = writeln!(md, "|---|---:|---:|---:|---:|");
        for r in rows {
            let _ = writeln!(
                md,
                "| {} | {} | {:.4} | {:.4} | {} |",
                r.distortion,
                trim_num(r.strength),
                r.value,
                r.std,
                r.n
            );
        }

        // strength-vs-value curve per distortion with multiple strengths
        let mut by_distortion: BTreeMap<&str, Vec<&ReportRow>> = BTreeMap::new();
        for r in rows {
            by_distortion.entry(r.distortion.as_str()).or_default().push(r);
        }
        for (distortion, points) in by_distortion {
            if points.len() < 2 {
                continue;
            }
            let mut points = points.clone();
            points.sort_by(|a, b| a.strength.total_cmp(&b.strength));
            let mut csv = String::from("strength,value,std,n\n");
            for p in points {
                let _ = writeln!(csv, "{:.6},{:.6},{:.6},{}", p.strength, p.value, p.std, p.n);
            }
            let fname = format!(
                "{}__{}__{}.csv",
                sanitize(section),
                sanitize(metric),
                sanitize(distortion)
            );
            let cpath = curves_dir.join(fname);
            std::fs::write(&cpath, csv).map_err(|e| Error::io(&cpath, e))?;
            curve_files.push(cpath);
        }
    }

    let md_path = out_dir.join("report.md");
    std::fs::write(&md_path, md).map_err(|e| Error::io(&md_path, e))?;
    Ok(RenderedReport {
        markdown_path: md_path,
        curve_files,
        sections: groups.len(),
    })
}

fn trim_num(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e9 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
