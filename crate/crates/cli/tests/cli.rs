use std::path::Path;
use std::process::{Command, Output};

fn hoimotion(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hoimotion"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = hoimotion(dir.path(), &["--set", "stage1.no_such_key=1", "gen-data"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = hoimotion(dir.path(), &["--set", "data.test_fraction=1.5", "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    let out = hoimotion(dir.path(), &["--set", "missing-equals", "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_phase_output_is_a_plain_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = hoimotion(dir.path(), &["train-stage1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));
}

#[test]
fn export_render_writes_reference_joints() {
    let dir = tempfile::tempdir().unwrap();
    let out = hoimotion(dir.path(), &["gen-data", "--n-clips", "2", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ids: Vec<String> = serde_json::from_str(&std::fs::read_to_string(dir.path().join("data/index.json")).unwrap()).unwrap();
    let file = dir.path().join("render.json");
    let out = hoimotion(
        dir.path(),
        &["export-render", "--clip", &ids[0], "--source", "reference", "--output", file.to_str().unwrap()],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&file).unwrap()).unwrap();
    assert_eq!(v["clip_id"], ids[0].as_str());
    assert_eq!(v["joint_names"].as_array().unwrap().len(), 22);
    let frames = v["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 100);
    assert_eq!(frames[0].as_array().unwrap().len(), 22);

    // generated motion does not exist before sampling
    let out = hoimotion(dir.path(), &["export-render", "--clip", &ids[0]]);
    assert_eq!(out.status.code(), Some(1));
}
