//! End-to-end CLI checks against the built binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use anchormark::imageio;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_anchormark")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("AM_SEED")
        .env_remove("AM_CONFIG")
        .output()
        .expect("spawn anchormark")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

fn write_test_image(dir: &Path) -> PathBuf {
    let item = imageio::generate_synthetic_items(3, 99).unwrap().remove(2);
    let path = dir.join("input.png");
    item.image.save_png(&path).unwrap();
    path
}

#[test]
fn keygen_writes_magic_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let k1 = dir.path().join("key1.bin");
    let k2 = dir.path().join("key2.bin");
    for (path, _) in [(&k1, 0), (&k2, 1)] {
        let out = run(&[
            "keygen",
            "--seed",
            "1",
            "--k",
            "10",
            "--d",
            "4096",
            "--out",
            path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let b1 = std::fs::read(&k1).unwrap();
    let b2 = std::fs::read(&k2).unwrap();
    assert_eq!(&b1[..8], b"TGWMKEY1");
    assert_eq!(b1, b2, "same seed must give byte-identical key files");
}

#[test]
fn embed_extract_round_trip_prints_message() {
    let dir = tempfile::tempdir().unwrap();
    let image = write_test_image(dir.path());
    let key = dir.path().join("key.bin");
    let marked = dir.path().join("marked.png");

    let out = run(&[
        "keygen", "--seed", "5", "--k", "10", "--d", "256", "--out",
        key.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    let out = run(&[
        "wm-embed",
        "--seed",
        "7",
        "--image",
        image.to_str().unwrap(),
        "--key",
        key.to_str().unwrap(),
        "--message",
        "1011001010",
        "--out",
        marked.to_str().unwrap(),
        "--backbone",
        "stub",
        "--backbone-dim",
        "256",
        "--mu",
        "0.04",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    let out = run(&[
        "wm-extract",
        "--image",
        marked.to_str().unwrap(),
        "--key",
        key.to_str().unwrap(),
        "--backbone",
        "stub",
        "--backbone-dim",
        "256",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "1011001010");

    // the marked PNG must hold the PSNR floor against the input
    let original = imageio::load_image(&image, 224).unwrap();
    let watermarked = imageio::load_image(&marked, 224).unwrap();
    assert!(imageio::psnr(&original, &watermarked).unwrap() >= 39.5);
}

#[test]
fn extract_with_mismatched_key_dimension_fails_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let image = write_test_image(dir.path());
    let key = dir.path().join("key.bin");
    let out = run(&[
        "keygen", "--seed", "5", "--k", "10", "--d", "4096", "--out",
        key.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    let out = run(&[
        "wm-extract",
        "--image",
        image.to_str().unwrap(),
        "--key",
        key.to_str().unwrap(),
        "--backbone",
        "stub",
        "--backbone-dim",
        "256",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(
        err.contains("dimension") || err.contains("d=4096"),
        "missing dimension diagnostic: {err}"
    );
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = run(&["keygen", "--bogus-flag", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn attack_identity_cell_preserves_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let image = write_test_image(dir.path());
    let attacked = dir.path().join("attacked.png");
    let out = run(&[
        "attack",
        "--image",
        image.to_str().unwrap(),
        "--name",
        "brightness_1",
        "--out",
        attacked.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let a = std::fs::read(&image).unwrap();
    let b = std::fs::read(&attacked).unwrap();
    // both are PNGs of identical pixel content
    let ia = image::load_from_memory(&a).unwrap().to_rgb8();
    let ib = image::load_from_memory(&b).unwrap().to_rgb8();
    assert_eq!(ia.as_raw(), ib.as_raw());
}

#[test]
fn attack_unknown_name_lists_cells() {
    let dir = tempfile::tempdir().unwrap();
    let image = write_test_image(dir.path());
    let out = run(&[
        "attack",
        "--image",
        image.to_str().unwrap(),
        "--name",
        "nonsense",
        "--out",
        dir.path().join("x.png").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("blur_k3"));
}

#[test]
fn eval_invariance_and_report_round_trip_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let results_a = dir.path().join("a");
    let results_b = dir.path().join("b");
    for results in [&results_a, &results_b] {
        let out = run(&[
            "eval-invariance",
            "--seed",
            "3",
            "--data",
            "synth:4",
            "--backbone",
            "stub",
            "--backbone-dim",
            "64",
            "--distortion",
            "rotation",
            "--strengths",
            "5,30",
            "--out-dir",
            results.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let csv_a = std::fs::read(results_a.join("invariance.csv")).unwrap();
    let csv_b = std::fs::read(results_b.join("invariance.csv")).unwrap();
    assert_eq!(csv_a, csv_b, "reports must be byte-identical across runs");
    let text = String::from_utf8(csv_a).unwrap();
    assert_eq!(text.lines().count(), 3, "header plus two strength rows");

    let report_dir = dir.path().join("report");
    let out = run(&[
        "report",
        "--results",
        results_a.to_str().unwrap(),
        "--out-dir",
        report_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let md = std::fs::read_to_string(report_dir.join("report.md")).unwrap();
    assert!(md.contains("eval-invariance"));
    let curves: Vec<_> = std::fs::read_dir(report_dir.join("curves"))
        .unwrap()
        .collect();
    assert_eq!(curves.len(), 1);
}

#[test]
fn report_on_empty_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("results");
    std::fs::create_dir_all(&empty).unwrap();
    let out = run(&[
        "report",
        "--results",
        empty.to_str().unwrap(),
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_checkpoints_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("run_a");
    let out_b = dir.path().join("run_b");
    for out_dir in [&out_a, &out_b] {
        let out = run(&[
            "train",
            "--seed",
            "7",
            "--data",
            "synth:6",
            "--backbone",
            "stub",
            "--backbone-dim",
            "32",
            "--batch-size",
            "8",
            "--epochs",
            "1",
            "--max-steps",
            "2",
            "--proj-hidden",
            "48",
            "--proj-out",
            "40",
            "--out-dir",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let a = std::fs::read(out_a.join("final.ckpt")).unwrap();
    let b = std::fs::read(out_b.join("final.ckpt")).unwrap();
    assert_eq!(a, b, "checkpoints must be byte-identical across runs");
    assert!(out_a.join("run-config.toml").exists());
    assert!(out_a.join("metrics.jsonl").exists());
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "seed = 11\n[backbone]\nname = \"stub\"\ndim = 64\n",
    )
    .unwrap();
    let k1 = dir.path().join("k1.bin");
    let out = run(&[
        "keygen",
        "--config",
        config.to_str().unwrap(),
        "--k",
        "4",
        "--d",
        "64",
        "--out",
        k1.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("seed=11"), "{}", stdout(&out));

    // flag overrides the file seed
    let k2 = dir.path().join("k2.bin");
    let out = run(&[
        "keygen",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "12",
        "--k",
        "4",
        "--d",
        "64",
        "--out",
        k2.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("seed=12"));
    assert_ne!(std::fs::read(&k1).unwrap(), std::fs::read(&k2).unwrap());
}

#[test]
fn env_var_overrides_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "seed = 11\n").unwrap();
    let key = dir.path().join("k.bin");
    let out = Command::new(bin())
        .args([
            "keygen",
            "--config",
            config.to_str().unwrap(),
            "--k",
            "4",
            "--d",
            "64",
            "--out",
            key.to_str().unwrap(),
        ])
        .env("AM_SEED", "99")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("seed=99"), "{}", stdout(&out));
}

/// Full pipeline: train, keygen, robustness, compare, linear probe, report.
#[test]
fn full_pipeline_through_report() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let results = dir.path().join("results");
    let key = dir.path().join("key.bin");

    let out = run(&[
        "train", "--seed", "7", "--data", "synth:12", "--backbone-dim", "64",
        "--batch-size", "8", "--epochs", "1", "--max-steps", "3",
        "--proj-hidden", "96", "--proj-out", "64",
        "--out-dir", run_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let ckpt = run_dir.join("final.ckpt");

    let out = run(&[
        "keygen", "--seed", "1", "--k", "8", "--d", "64", "--out",
        key.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    let out = run(&[
        "eval-robustness", "--seed", "5", "--data", "synth:3", "--images", "2",
        "--backbone-dim", "64", "--ckpt", ckpt.to_str().unwrap(),
        "--key", key.to_str().unwrap(), "--iterations", "30", "--mu", "0.04",
        "--grid", "test", "--out-dir", results.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(results.join("robustness.csv").exists());

    let extractor_raw = "raw=stub:0:64".to_string();
    let extractor_proj = format!("ours=stub:0:64+{}", ckpt.to_str().unwrap());
    let out = run(&[
        "eval-compare", "--seed", "5", "--data", "synth:3",
        "--extractor", &extractor_raw, "--extractor", &extractor_proj,
        "--out-dir", results.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let compare = std::fs::read_to_string(results.join("compare.csv")).unwrap();
    // 2 extractors x 6 suite cells, plus the header
    assert_eq!(compare.lines().count(), 13, "{compare}");

    let out = run(&[
        "eval-linear", "--seed", "5", "--data", "synth:20", "--backbone-dim", "64",
        "--ckpt", ckpt.to_str().unwrap(), "--out-dir", results.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(results.join("linear.csv").exists());

    let report_dir = dir.path().join("report");
    let out = run(&[
        "report", "--results", results.to_str().unwrap(), "--out-dir",
        report_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let md = std::fs::read_to_string(report_dir.join("report.md")).unwrap();
    assert!(md.contains("eval-robustness"));
    assert!(md.contains("eval-compare"));
    assert!(md.contains("eval-linear"));
}
