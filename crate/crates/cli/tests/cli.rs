//! Drives the `imfseg` binary through a complete run on a tiny phantom
//! dataset.

use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "\
slice_size = 32
depth = 2
base_channels = 4
plg_epochs = 1
pld_epochs = 1
augment = false
contrast_adjust = false
learning_rate = 5e-4
batch_size = 4
";

fn imfseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imfseg"))
        .current_dir(dir)
        .env_remove("IMFSEG_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = imfseg(dir, args);
    assert!(
        out.status.success(),
        "imfseg {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn generate(dir: &Path) {
    ok(
        dir,
        &[
            "phantom-generate",
            "--out-dir",
            "data",
            "--n-train",
            "12",
            "--n-test",
            "4",
            "--slices-per-subject",
            "4",
            "--image-size",
            "32",
        ],
    );
    std::fs::write(dir.join("config.toml"), CONFIG).unwrap();
}

#[test]
fn full_run_through_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);
    assert!(dir.join("data/manifest.csv").exists());

    let common = [
        "--config",
        "config.toml",
        "--data-root",
        "data",
        "--out-dir",
        "run",
    ];
    let with = |cmd: &'static str| [&[cmd][..], &common[..]].concat();

    ok(dir, &with("plg-train"));
    assert!(dir.join("run/plg/checkpoint.bin").exists());
    assert!(dir.join("run/plg/metrics.csv").exists());
    assert!(dir.join("run/run.json").exists());

    ok(dir, &with("pseudo-generate"));
    assert!(dir.join("run/records").read_dir().unwrap().count() > 0);

    ok(dir, &with("pld-train"));
    assert!(dir.join("run/pld/checkpoint.bin").exists());

    let report = ok(dir, &with("evaluate"));
    assert!(report.starts_with("PLD: Dice_TM"), "{report}");
    assert!(dir.join("run/eval/pld.csv").exists());

    let mut args = with("predict");
    args.push("--overlays");
    ok(dir, &args);
    let predictions: Vec<_> = dir.join("run/predictions").read_dir().unwrap().collect();
    assert_eq!(predictions.len(), 8, "four masks and four overlays");
}

#[test]
fn data_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);
    let out = Command::new(env!("CARGO_BIN_EXE_imfseg"))
        .current_dir(dir)
        .env("IMFSEG_DATA_ROOT", dir.join("data"))
        .env("RUST_LOG", "warn")
        .args(["plg-train", "--config", "config.toml", "--out-dir", "run"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_inputs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);

    std::fs::write(dir.join("typo.toml"), "learnig_rate = 0.1\n").unwrap();
    let out = imfseg(
        dir,
        &["plg-train", "--config", "typo.toml", "--data-root", "data"],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learnig_rate"));

    let out = imfseg(
        dir,
        &[
            "ablate",
            "--axes",
            "ce,dropout",
            "--config",
            "config.toml",
            "--data-root",
            "data",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dropout"));

    let out = imfseg(dir, &["evaluate", "--out-dir", "missing", "--data-root", "data"]);
    assert!(!out.status.success());
}
