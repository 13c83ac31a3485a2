use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_ccm");

const TINY: &str = "\
# small enough for a unit test
side=16
meas_side=16
per_layer=20
test_count=6
max_epochs=2
depth=2
base_channels=4
batch_size=4
";

fn ccm(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("ccm runs")
}

fn ok(args: &[&str]) -> String {
    let out = ccm(args);
    assert!(
        out.status.success(),
        "ccm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn pipeline(cfg: &Path, out: &Path) -> String {
    let c = cfg.to_str().unwrap();
    let o = out.to_str().unwrap();
    ok(&["gen-data", "--config", c, "--out", o, "--seed", "3"]);
    ok(&[
        "train", "--config", c, "--out", o, "--seed", "3", "--net", "ann2",
    ]);
    ok(&[
        "eval", "--config", c, "--out", o, "--seed", "3", "--net", "ann2",
    ]);
    fs::read_to_string(out.join("reports/eval_ann2.txt")).unwrap()
}

#[test]
fn same_seed_gives_identical_eval_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let a = pipeline(&cfg, &dir.path().join("a"));
    let b = pipeline(&cfg, &dir.path().join("b"));
    assert!(a.contains("test.ssim="));
    assert_eq!(a, b);
    let ma = fs::read(dir.path().join("a/models/ann2.ccmm")).unwrap();
    let mb = fs::read(dir.path().join("b/models/ann2.ccmm")).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn eval_without_a_model_names_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = ccm(&[
        "eval",
        "--net",
        "ann1_r",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ann1_r.ccmm"), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "));
}

#[test]
fn usage_errors_exit_with_status_two() {
    for args in [&["eval", "--bogus"][..], &["frobnicate"], &[]] {
        let out = ccm(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    }
}

#[test]
fn config_keys_are_checked_and_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "per_layer=5\nwhatever=1\n").unwrap();
    let out = ccm(&["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("whatever"));

    fs::write(&cfg, TINY).unwrap();
    let o = dir.path().join("o");
    ok(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        o.to_str().unwrap(),
        "--per-layer",
        "24",
    ]);
    let report = fs::read_to_string(o.join("reports/gen-data.txt")).unwrap();
    assert!(report.contains("per_layer=24\n"), "{report}");
    assert!(report.contains("side=16\n"));
}

#[test]
fn unknown_net_and_missing_input_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    let out = ccm(&["train", "--net", "resnet", "--out", o]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("resnet"));
    let out = ccm(&["recon", "--net", "ann1_r", "--out", o]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--input"));
}
