use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cryodiff::{metrics, mrc};
use serde_json::Value;

const EXE: &str = env!("CARGO_BIN_EXE_cryodiff");

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn write(&self, rel: &str, text: &str) {
        fs::write(self.path(rel), text).unwrap();
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(EXE)
            .arg("--serial")
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "cryodiff {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }

    fn code(&self, args: &[&str]) -> i32 {
        self.run(args).status.code().unwrap()
    }

    /// Phantom plus a 24-image dataset (12 train, 12 test).
    fn dataset(&self, snr: &str) {
        self.ok(&["phantom", "--out", "ph", "--side", "32", "--seed", "2"]);
        self.write(
            "sim.json",
            &format!(
                r#"{{"map": "ph/phantom.mrc", "simulation": {{"n_images": 24, "snr": {snr}, "image_size": 32, "rng_seed": 5, "split": [0.5, 0.0, 0.5]}}}}"#
            ),
        );
        self.ok(&["simulate", "--config", "sim.json", "--out", "ds"]);
    }

    fn train_diffusion(&self) {
        self.write(
            "diffusion.json",
            r#"{"model": {"base_width": 4, "levels": 2, "embed_dim": 8}, "train": {"epochs": 2, "batch_size": 4, "rng_seed": 1, "checkpoint_every": 1}, "model_seed": 3}"#,
        );
        self.ok(&[
            "train",
            "diffusion",
            "--dataset",
            "ds",
            "--config",
            "diffusion.json",
            "--out",
            "td",
        ]);
    }
}

fn last_manifest_line(dir: &Path) -> Value {
    let text = fs::read_to_string(dir.join("run_manifest.jsonl")).unwrap();
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    let ws = Workspace::new();
    assert_eq!(ws.code(&["--help"]), 0);
    assert_eq!(ws.code(&["--version"]), 0);
    assert_eq!(ws.code(&["frobnicate"]), 1);
    assert_eq!(ws.code(&["phantom"]), 1);
}

#[test]
fn config_and_io_failures_map_to_exit_codes() {
    let ws = Workspace::new();
    ws.write(
        "missing.json",
        r#"{"map": "nowhere.mrc", "simulation": {"n_images": 4, "snr": 1.0, "rng_seed": 0}}"#,
    );
    assert_eq!(
        ws.code(&["simulate", "--config", "missing.json", "--out", "a"]),
        2
    );
    ws.write(
        "bad.json",
        r#"{"map": "x.mrc", "simulation": {"n_images": 4, "snr": 1.0, "rng_seed": 0, "bogus": 1}}"#,
    );
    assert_eq!(
        ws.code(&["simulate", "--config", "bad.json", "--out", "b"]),
        1
    );
    assert_eq!(
        ws.code(&["simulate", "--config", "absent.json", "--out", "c"]),
        2
    );
    ws.write("garbage.mrc", "not an mrc file");
    assert_eq!(
        ws.code(&[
            "baseline",
            "--input",
            "garbage.mrc",
            "--method",
            "lowpass",
            "--param",
            "1",
            "--out",
            "d"
        ]),
        2
    );
}

#[test]
fn output_directory_must_be_fresh() {
    let ws = Workspace::new();
    ws.ok(&["phantom", "--out", "ph", "--side", "16"]);
    assert_eq!(ws.code(&["phantom", "--out", "ph", "--side", "16"]), 1);
}

#[test]
fn training_writes_one_loss_row_per_step_and_epoch_checkpoints() {
    let ws = Workspace::new();
    ws.dataset("0.5");
    ws.train_diffusion();
    let loss = fs::read_to_string(ws.path("td/loss.csv")).unwrap();
    let mut lines = loss.lines();
    assert_eq!(lines.next(), Some("step,epoch,loss"));
    // 12 training images in batches of 4 for 2 epochs.
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[5].starts_with("6,2,"));
    for name in [
        "diffusion.ckpt",
        "diffusion_epoch0001.ckpt",
        "diffusion_epoch0002.ckpt",
    ] {
        assert!(ws.path("td").join(name).is_file(), "{name} missing");
    }
    let line = last_manifest_line(&ws.path("td"));
    assert_eq!(line["command"], "train diffusion");
    assert!(line["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .all(|o| o["sha256"].as_str().unwrap().len() == 64));
}

#[test]
fn post_training_requires_a_diffusion_checkpoint() {
    let ws = Workspace::new();
    ws.dataset("0.5");
    ws.write("post.json", r#"{"train": {"epochs": 1, "rng_seed": 0}}"#);
    assert_eq!(
        ws.code(&[
            "train",
            "post",
            "--dataset",
            "ds",
            "--config",
            "post.json",
            "--out",
            "tp"
        ]),
        1
    );
    assert_eq!(
        ws.code(&[
            "train",
            "post",
            "--dataset",
            "ds",
            "--config",
            "post.json",
            "--diffusion",
            "none.ckpt",
            "--out",
            "tp2",
        ]),
        2
    );
}

#[test]
fn denoise_with_fewer_steps_than_training() {
    let ws = Workspace::new();
    ws.dataset("0.5");
    ws.train_diffusion();
    ws.write(
        "post.json",
        r#"{"model": {"base_width": 4, "levels": 2}, "train": {"epochs": 1, "batch_size": 4, "rng_seed": 1}, "inference_steps": 3}"#,
    );
    ws.ok(&[
        "train",
        "post",
        "--dataset",
        "ds",
        "--config",
        "post.json",
        "--diffusion",
        "td/diffusion.ckpt",
        "--out",
        "tp",
    ]);
    ws.ok(&[
        "denoise",
        "--dataset",
        "ds",
        "--diffusion",
        "td/diffusion.ckpt",
        "--post",
        "tp/post.ckpt",
        "--steps",
        "5",
        "--out",
        "dn",
    ]);
    let stage2 = mrc::read_stack(ws.path("dn/denoised.mrc")).unwrap();
    let stage1 = mrc::read_stack(ws.path("dn/diffusion.mrc")).unwrap();
    assert_eq!(stage2.len(), 12);
    assert_eq!(stage1.len(), 12);
    assert_eq!(stage2.image_dim(), Some((32, 32)));
    let line = last_manifest_line(&ws.path("dn"));
    assert_eq!(line["config"]["inference_steps"], 5);
}

#[test]
fn eval_of_identical_stacks_scores_zero_error() {
    let ws = Workspace::new();
    ws.dataset("0.5");
    ws.ok(&[
        "eval",
        "--denoised",
        "ds/clean.mrc",
        "--clean",
        "ds/clean.mrc",
        "--out",
        "ev",
    ]);
    let csv = fs::read_to_string(ws.path("ev/metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(metrics::METRICS_CSV_HEADER));
    let rows: Vec<Vec<String>> = lines
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    assert_eq!(rows.len(), 24);
    for row in &rows {
        assert_eq!(row[1].parse::<f64>().unwrap(), 0.0);
        assert_eq!(row[3].parse::<f64>().unwrap(), 1.0);
    }
    let json: Value =
        serde_json::from_str(&fs::read_to_string(ws.path("ev/metrics.json")).unwrap()).unwrap();
    assert!(json.is_object());
}

#[test]
fn eval_rejects_mismatched_counts() {
    let ws = Workspace::new();
    ws.dataset("0.5");
    // 24 images against the 12-image test split.
    assert_eq!(
        ws.code(&[
            "eval",
            "--denoised",
            "ds/clean.mrc",
            "--dataset",
            "ds",
            "--out",
            "ev"
        ]),
        1
    );
}

#[test]
fn fsc_of_a_volume_with_itself_never_crosses() {
    let ws = Workspace::new();
    ws.ok(&["phantom", "--out", "ph", "--side", "32"]);
    ws.ok(&[
        "fsc",
        "--a",
        "ph/phantom.mrc",
        "--b",
        "ph/phantom.mrc",
        "--out",
        "fs",
    ]);
    let line = fs::read_to_string(ws.path("fs/resolution.txt")).unwrap();
    assert!(line.starts_with("resolution: no-crossing"), "{line}");
    let csv = fs::read_to_string(ws.path("fs/fsc.csv")).unwrap();
    assert!(csv.starts_with(metrics::FSC_CSV_HEADER));
    assert_eq!(csv.lines().count(), 1 + 16);
    ws.ok(&["plot", "--fsc", "fs/fsc.csv=self", "--out", "pl"]);
    assert!(fs::read_to_string(ws.path("pl/fsc.svg"))
        .unwrap()
        .contains("<svg"));
}

#[cfg(unix)]
fn script(ws: &Workspace, name: &str, body: &str) -> String {
    use std::os::unix::fs::PermissionsExt;
    let path = ws.path(name);
    fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
    fs::set_permissions(&path, fs::Permissions::from_mode(0o755)).unwrap();
    path.display().to_string()
}

#[cfg(unix)]
#[test]
fn adapter_runs_external_program_and_checks_shape() {
    let ws = Workspace::new();
    ws.dataset("0.5");
    let copy = script(&ws, "copy.sh", r#"cp "$1" "$2""#);
    ws.ok(&["adapter", "--dataset", "ds", "--exe", &copy, "--out", "ad"]);
    let out = mrc::read_stack(ws.path("ad/denoised.mrc")).unwrap();
    let input = mrc::read_stack(ws.path("ad/adapter_input.mrc")).unwrap();
    assert_eq!(out.images, input.images);

    let wrong = script(
        &ws,
        "wrong.sh",
        &format!(r#"cp "{}" "$2""#, ws.path("ph/phantom.mrc").display()),
    );
    assert_eq!(
        ws.code(&[
            "adapter",
            "--dataset",
            "ds",
            "--exe",
            &wrong,
            "--out",
            "ad2"
        ]),
        1
    );
    let failing = script(&ws, "fail.sh", "exit 7");
    assert_ne!(
        ws.code(&[
            "adapter",
            "--dataset",
            "ds",
            "--exe",
            &failing,
            "--out",
            "ad3"
        ]),
        0
    );
}

#[test]
fn recon_requires_a_pose_manifest() {
    let ws = Workspace::new();
    ws.dataset("0.5");
    fs::create_dir(ws.path("empty")).unwrap();
    assert_eq!(
        ws.code(&[
            "recon",
            "--stack",
            "ds/clean.mrc",
            "--dataset",
            "empty",
            "--out",
            "rc"
        ]),
        1
    );
}

#[test]
fn noise_free_identity_experiment_reconstructs_the_phantom() {
    let ws = Workspace::new();
    ws.ok(&["phantom", "--out", "ph", "--side", "32", "--seed", "4"]);
    ws.write(
        "sim.json",
        r#"{"map": "ph/phantom.mrc", "simulation": {"n_images": 1000, "snr": "inf", "image_size": 32, "rng_seed": 3, "split": [0.0, 0.0, 1.0]}}"#,
    );
    ws.ok(&["simulate", "--config", "sim.json", "--out", "ds"]);
    ws.ok(&[
        "recon",
        "--stack",
        "ds/clean.mrc",
        "--dataset",
        "ds",
        "--out",
        "rc",
    ]);
    ws.ok(&[
        "fsc",
        "--a",
        "rc/recon.mrc",
        "--b",
        "ph/phantom.mrc",
        "--out",
        "fs",
    ]);
    let csv = fs::read_to_string(ws.path("fs/fsc.csv")).unwrap();
    for (shell, line) in csv.lines().skip(1).enumerate().take(7) {
        let fsc: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(fsc > 0.9, "shell {}: {fsc}", shell + 1);
    }
}
