use std::path::Path;
use std::process::{Command, Output};

fn asda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asda"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = asda(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_data_writes_images_manifest_and_groundtruth() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(&["gen-data", "--preset", "tiny", "--out", p(&out)]);
    let manifest = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().next().unwrap(), "image,instance,split,area_fraction");
    assert_eq!(manifest.lines().count(), 1 + 10 * 3);
    assert!(out.join("i000_v000.ppm").exists());
    assert!(out.join("groundtruth.txt").exists());
}

#[test]
fn train_eval_describe_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let stdout = ok(&["train", "--preset", "tiny", "--epochs", "1", "--out", p(&run)]);
    assert!(stdout.contains("checkpoint:"));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let ckpt = run.join("checkpoint.ckpt");

    let ev = dir.path().join("eval");
    let report = ok(&[
        "eval", "--preset", "tiny", "--checkpoint", p(&ckpt), "--modes", "SS,MS+LW", "--out", p(&ev),
    ]);
    let rows: Vec<&str> = report.lines().collect();
    assert_eq!(rows.len(), 3);
    for row in &rows[1..] {
        let map: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&map));
    }
    assert!(ev.join("eval.csv").exists() && ev.join("eval.json").exists());

    let data = dir.path().join("data");
    ok(&["gen-data", "--preset", "tiny", "--out", p(&data)]);
    let desc = dir.path().join("d.csv");
    ok(&[
        "describe", "--preset", "tiny", "--checkpoint", p(&ckpt), "--input", p(&data.join("i000_v000.ppm")),
        "--output", p(&desc), "--whiten",
    ]);
    assert!(std::fs::metadata(&desc).unwrap().len() > 0);
}

#[test]
fn checkpoint_from_other_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--preset", "tiny", "--epochs", "1", "--out", p(&run)]);
    let out = asda(&[
        "eval", "--preset", "tiny", "--theta", "0.5", "--checkpoint", p(&run.join("checkpoint.ckpt")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn invalid_settings_exit_nonzero() {
    for args in [
        vec!["train", "--preset", "tiny", "--theta", "1.5"],
        vec!["train", "--preset", "tiny", "--bogus", "1"],
        vec!["train", "--preset", "nope"],
        vec!["ablate", "--preset", "tiny", "--axis", "colour"],
    ] {
        let out = asda(&args);
        assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    }
}

#[test]
fn list_keys_prints_every_key() {
    let out = ok(&["train", "--preset", "tiny", "--list-keys"]);
    assert!(out.lines().any(|l| l == "k = 4"));
    assert!(out.lines().any(|l| l.starts_with("theta = ")));
}
