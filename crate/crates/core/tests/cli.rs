//! Command-line behaviour: exit codes, run directories, staged runs and
//! reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 4
[data]
image_size = 32
[data.synthetic]
n_stacks = 2
slices_per_stack = 16
lesion_radius_range = [3, 6]
[model]
base_channels = 4
[train]
epochs = 2
[finetune]
epochs = 1
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Self::with_seed(4)
    }

    fn with_seed(seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let text = SMALL.replace("seed = 4", &format!("seed = {seed}"));
        std::fs::write(dir.path().join("small.toml"), text).unwrap();
        Self { dir }
    }

    fn root(&self) -> PathBuf {
        self.dir.path().join("runs")
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.dir.path().join("small.toml");
        Command::new(env!("CARGO_BIN_EXE_qunetpp"))
            .args(args)
            .arg("--config")
            .arg(&config)
            .env("QUNETPP_OUTPUT_ROOT", self.root())
            .env("QUNETPP_THREADS", "1")
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    /// Runs a command expected to succeed and returns its last stdout line.
    fn ok(&self, args: &[&str]) -> PathBuf {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let text = String::from_utf8(out.stdout).unwrap();
        PathBuf::from(text.lines().last().unwrap().trim())
    }
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

#[test]
fn usage_errors_exit_2() {
    let sb = Sandbox::new();
    assert_eq!(sb.run(&["quality-scan"]).status.code(), Some(2));
    assert_eq!(sb.run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(sb.run(&["run-pipeline", "--bogus"]).status.code(), Some(2));
    assert_eq!(sb.run(&["run-pipeline", "--seed", "x"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_1() {
    let sb = Sandbox::new();
    let out = sb.run(&["run-pipeline", "--q0", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("q0"));
    let out = sb.run(&["evaluate", "--checkpoint", "/definitely/missing.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    let out = sb.run(&["quality-scan", "--manifest", "/definitely/missing.csv"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pipeline_runs_are_append_only_and_reproducible() {
    let sb = Sandbox::new();
    let first = sb.ok(&["run-pipeline"]);
    for file in [
        "config.resolved",
        "quality.csv",
        "selection_report.json",
        "checkpoint_pre.ckpt",
        "checkpoint_post.ckpt",
        "metrics.csv",
        "loss_history.csv",
        "finetune_loss_history.csv",
    ] {
        assert!(first.join(file).exists(), "missing {file}");
    }
    let before = snapshot(&first);

    // replaying the resolved config alone reproduces the run
    let resolved = first.join("config.resolved");
    let out = Command::new(env!("CARGO_BIN_EXE_qunetpp"))
        .args(["run-pipeline", "--config"])
        .arg(&resolved)
        .env("QUNETPP_OUTPUT_ROOT", sb.root())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success());
    let second = PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
    assert_ne!(first, second);
    assert_eq!(snapshot(&first), before, "earlier run directory was modified");
    let after = snapshot(&second);
    for file in ["selection_report.json", "checkpoint_post.ckpt", "metrics.csv"] {
        assert_eq!(before[file], after[file], "{file} differs on replay");
    }

    let figures = sb.ok(&["report", "--run", first.to_str().unwrap(), "--overlays", "3"]);
    let written: Vec<_> = std::fs::read_dir(figures.parent().unwrap()).unwrap().collect();
    assert_eq!(written.len(), 2 + 3);
    assert_eq!(snapshot(&first), before, "report modified the run directory");
}

#[test]
fn staged_commands_chain() {
    // at this size some seeds leave the below-means quadrant empty once the
    // slices go through 8-bit PNGs; seed 3 keeps a few
    let sb = Sandbox::with_seed(3);
    let synthetic = sb.ok(&["generate-synthetic"]);
    assert!(synthetic.ends_with("manifest.csv"));
    assert!(synthetic.with_file_name("spec.json").exists());
    let manifest = synthetic.to_str().unwrap();

    let scan = sb.ok(&["quality-scan", "--manifest", manifest, "--plot"]);
    assert!(scan.join("quality.csv").exists() && scan.join("quality_scatter.png").exists());

    let init = sb.ok(&["select-initial", "--manifest", manifest]);
    let trained = sb.ok(&["train", "--manifest", manifest, "--from", init.to_str().unwrap()]);
    let pre = trained.join("checkpoint_pre.ckpt");
    let sel = sb.ok(&[
        "select-minimal",
        "--manifest",
        manifest,
        "--checkpoint",
        pre.to_str().unwrap(),
        "--from",
        init.to_str().unwrap(),
    ]);
    let report = sel.join("selection_report.json");
    let tuned = sb.ok(&[
        "finetune",
        "--manifest",
        manifest,
        "--checkpoint",
        pre.to_str().unwrap(),
        "--selection",
        report.to_str().unwrap(),
    ]);
    let post = tuned.join("checkpoint_post.ckpt");
    let eval = sb.ok(&[
        "evaluate",
        "--manifest",
        manifest,
        "--checkpoint",
        post.to_str().unwrap(),
        "--overlays",
        "1",
    ]);
    let metrics = std::fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("stack_id,slice_index,precision,recall,jaccard,dice,accuracy"));
    assert!(metrics.lines().last().unwrap().starts_with("MEAN"));

    let base = sb.ok(&[
        "baseline-random",
        "--manifest",
        manifest,
        "--runs",
        "2",
        "--epochs",
        "1",
    ]);
    let rows = std::fs::read_to_string(base.join("baseline_runs.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 + 2);

    for dir in [&scan, &init, &trained, &sel, &tuned, &eval, &base] {
        assert!(
            dir.join("config.resolved").exists(),
            "{} lacks config.resolved",
            dir.display()
        );
    }
}

#[test]
fn empty_initial_set_is_a_runtime_error() {
    let sb = Sandbox::with_seed(5);
    let manifest = sb.ok(&["generate-synthetic"]);
    let manifest = manifest.to_str().unwrap();
    let init = sb.ok(&["select-initial", "--manifest", manifest]);
    let out = sb.run(&["train", "--manifest", manifest, "--from", init.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}
