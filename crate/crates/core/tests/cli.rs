use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use clip_prior::load_prior_stack;
use serde_json::Value;

fn clip_prior(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clip-prior"))
        .args(args)
        .output()
        .expect("spawn clip-prior")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn synth_validate_prior_render() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = tmp.path().join("ep0");
    let out = clip_prior(&[
        "synth",
        "--out",
        path(&bundle),
        "--seed",
        "3",
        "--k",
        "2",
        "--planted",
        "1,1,4,4",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = clip_prior(&["validate", path(&bundle)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("K=2"));

    let priors = tmp.path().join("priors");
    let out = clip_prior(&["prior", path(&bundle), "--output-dir", path(&priors)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stack = load_prior_stack(priors.join("ep0")).unwrap();
    assert_eq!(stack.channels.dim(), (3, 6, 6));
    assert_eq!(
        stack.metadata.channel_names,
        ["vvp_0", "vvp_1", "vtp_refined"]
    );
    let s = summary(&priors);
    assert_eq!(s["episodes"][0]["status"], "ok");
    assert_eq!(s["episodes"][0]["channels"].as_array().unwrap().len(), 3);

    let pgm = tmp.path().join("pgm");
    let out = clip_prior(&[
        "render",
        path(&priors.join("ep0")),
        "--output-dir",
        path(&pgm),
    ]);
    assert!(out.status.success());
    let bytes = fs::read(pgm.join("vtp_refined.pgm")).unwrap();
    assert!(bytes.starts_with(b"P5\n6 6\n255\n"));
    assert_eq!(bytes.len(), b"P5\n6 6\n255\n".len() + 36);
}

#[test]
fn batch_reports_corrupt_bundle_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let good = tmp.path().join("good");
    let bad = tmp.path().join("bad");
    for (dir, seed) in [(&good, "1"), (&bad, "2")] {
        assert!(clip_prior(&["synth", "--out", path(dir), "--seed", seed])
            .status
            .success());
    }
    let file = bad.join("query_features.bin");
    let len = fs::metadata(&file).unwrap().len();
    fs::OpenOptions::new()
        .write(true)
        .open(&file)
        .unwrap()
        .set_len(len - 4)
        .unwrap();

    let out_dir = tmp.path().join("out");
    let out = clip_prior(&[
        "prior",
        path(&bad),
        path(&good),
        "--output-dir",
        path(&out_dir),
        "--parallelism",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let s = summary(&out_dir);
    let eps = s["episodes"].as_array().unwrap();
    assert_eq!(eps.len(), 2);
    assert_eq!(eps[0]["status"], "failed");
    assert_eq!(eps[0]["error_code"], "ShapeMismatch");
    assert_eq!(eps[1]["status"], "ok");
    assert!(out_dir.join("good").join("manifest.json").exists());
    assert!(!out_dir.join("bad").exists());

    let out = clip_prior(&["validate", path(&good), path(&bad)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn empty_batch_writes_empty_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = clip_prior(&["prior", "--output-dir", path(tmp.path())]);
    assert!(out.status.success());
    assert_eq!(summary(tmp.path())["episodes"].as_array().unwrap().len(), 0);
}

#[test]
fn config_file_and_flag_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = tmp.path().join("ep");
    assert!(clip_prior(&["synth", "--out", path(&bundle)])
        .status
        .success());
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"enable_vtp": false, "refine_vvp": true}"#).unwrap();

    let out_dir = tmp.path().join("a");
    let out = clip_prior(&[
        "prior",
        path(&bundle),
        "--output-dir",
        path(&out_dir),
        "--config",
        path(&cfg),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stack = load_prior_stack(out_dir.join("ep")).unwrap();
    assert_eq!(stack.metadata.channel_names, ["vvp_0_refined"]);

    let out_dir = tmp.path().join("b");
    let out = clip_prior(&[
        "prior",
        path(&bundle),
        "--output-dir",
        path(&out_dir),
        "--config",
        path(&cfg),
        "--no-vvp",
    ]);
    // Neither component left enabled.
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("InvalidConfig"));

    fs::write(&cfg, r#"{"tau": 0.01, "bogus": 1}"#).unwrap();
    let out = clip_prior(&[
        "prior",
        path(&bundle),
        "--output-dir",
        path(&out_dir),
        "--config",
        path(&cfg),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn single_component_heatmaps() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = tmp.path().join("ep");
    assert!(clip_prior(&["synth", "--out", path(&bundle), "--k", "3"])
        .status
        .success());
    let vtp = tmp.path().join("vtp.pgm");
    assert!(clip_prior(&["vtp", path(&bundle), "--out", path(&vtp)])
        .status
        .success());
    assert!(fs::read(&vtp).unwrap().starts_with(b"P5\n"));
    let vvp = tmp.path().join("vvp");
    assert!(
        clip_prior(&["vvp", path(&bundle), "--output-dir", path(&vvp)])
            .status
            .success()
    );
    for k in 0..3 {
        assert!(vvp.join(format!("vvp_{k}.pgm")).exists());
    }
    let out = clip_prior(&[
        "vtp",
        path(&tmp.path().join("missing")),
        "--out",
        path(&vtp),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
