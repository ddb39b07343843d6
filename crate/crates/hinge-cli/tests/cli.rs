//! End-to-end exercises of the `hinge` binary: train, eval, gradcheck, and
//! the error surfaces a user will actually hit.

use std::io::Write;
use std::path::Path;
use std::process::Command;

fn hinge() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hinge"))
}

/// A small separable dataset plus a config pointing at it.
fn write_fixture(dir: &Path) -> std::path::PathBuf {
    let data_path = dir.join("blobs.csv");
    let mut data = std::fs::File::create(&data_path).unwrap();
    for i in 0..60 {
        let (cx, cy, label) = match i % 3 {
            0 => (-2.0, 0.0, "left"),
            1 => (2.0, 0.0, "right"),
            _ => (0.0, 2.5, "top"),
        };
        let dx = ((i * 7) % 11) as f64 / 11.0 - 0.5;
        let dy = ((i * 5) % 13) as f64 / 13.0 - 0.5;
        writeln!(data, "{},{},{label}", cx + dx, cy + dy).unwrap();
    }
    let config_path = dir.join("blobs.toml");
    std::fs::write(
        &config_path,
        format!(
            r#"
[dataset]
path = "{}"
label_column = 2
splits = [0.5, 0.25, 0.25]

[features]
kind = "inner_product"
count = 16

[forest]
trees = 5
depth = 3

[optimizer]
name = "adagrad"
learning_rate = 0.1

[run]
batch_size = 10
max_steps = 300
eval_interval = 100
out_dir = "{}"
"#,
            data_path.display(),
            dir.join("run").display()
        ),
    )
    .unwrap();
    config_path
}

#[test]
fn train_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fixture(dir.path());

    let out = hinge().args(["train"]).arg(&config).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("# canonical configuration"), "{stdout}");
    assert!(stdout.contains("[dataset]"), "{stdout}");
    assert!(dir.path().join("run/metrics.tsv").exists());
    assert!(dir.path().join("run/final.hfm").exists());
    assert!(dir.path().join("run/best.hfm").exists());

    let out = hinge()
        .args(["eval"])
        .arg(dir.path().join("run/best.hfm"))
        .arg(&config)
        .args(["--split", "test"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("misclassification:"), "{stdout}");
}

#[test]
fn seed_and_out_dir_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fixture(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out_dir in [&out_a, &out_b] {
        let out = hinge()
            .args(["train"])
            .arg(&config)
            .args(["--seed", "7", "--out-dir"])
            .arg(out_dir)
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    let a = std::fs::read(out_a.join("metrics.tsv")).unwrap();
    let b = std::fs::read(out_b.join("metrics.tsv")).unwrap();
    assert_eq!(a, b, "same config and seed must produce identical metrics");
}

#[test]
fn gradcheck_passes_on_a_real_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fixture(dir.path());
    let out = hinge()
        .args(["gradcheck"])
        .arg(&config)
        .args(["--samples", "80"])
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.contains("gradcheck: PASS"), "{stdout}");
}

#[test]
fn invalid_config_lists_violations() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(
        &config,
        "[dataset]\npath = \"/nonexistent.csv\"\n\n[forest]\ntrees = 0\ndepth = 0\n",
    )
    .unwrap();
    let out = hinge().args(["train"]).arg(&config).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("forest.trees"), "{stderr}");
    assert!(stderr.contains("forest.depth"), "{stderr}");
    assert!(stderr.contains("dataset.path"), "{stderr}");
}

#[test]
fn eval_rejects_mismatched_features() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fixture(dir.path());
    hinge().args(["train"]).arg(&config).output().unwrap();

    // A dataset with three features instead of two.
    let other_csv = dir.path().join("other.csv");
    let mut f = std::fs::File::create(&other_csv).unwrap();
    for i in 0..20 {
        writeln!(f, "{i},{},{},x", i * 2, i * 3).unwrap();
    }
    let other_config = dir.path().join("other.toml");
    std::fs::write(
        &other_config,
        format!(
            "[dataset]\npath = \"{}\"\nlabel_column = 3\nsplits = [0.5, 0.25, 0.25]\n\n[forest]\ntrees = 5\ndepth = 3\n",
            other_csv.display()
        ),
    )
    .unwrap();
    let out = hinge()
        .args(["eval"])
        .arg(dir.path().join("run/best.hfm"))
        .arg(&other_config)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("example shape"), "{stderr}");
}
