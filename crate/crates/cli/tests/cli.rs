use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn pbnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pbnet")).args(args).output().unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// The shipped design config, shrunk to 8x8 so a run takes well under a second.
fn small_config(dir: &Path) -> PathBuf {
    let mut tree: Value = toml::from_str(&fs::read_to_string(configs().join("sr-design.toml")).unwrap()).unwrap();
    tree["image_size"] = 8.into();
    tree["unrolls"] = 3.into();
    tree["epochs"] = 2.into();
    tree["train_examples"] = 2.into();
    tree["test_examples"] = 2.into();
    tree["batch_size"] = 2.into();
    tree["sr"]["patch"] = 4.into();
    tree["sr"]["channels"] = 2.into();
    let path = dir.join("small.json");
    fs::write(&path, serde_json::to_string(&tree).unwrap()).unwrap();
    path
}

fn train(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    pbnet(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_single_line_error(o: &Output, code: i32, reason: &str) {
    assert_eq!(o.status.code(), Some(code), "{}", stderr(o));
    let err = stderr(o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error: {reason}")), "{err}");
}

#[test]
fn one_epoch_writes_header_and_two_rows() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let o = train(&small_config(dir.path()), &out, &["--override", "epochs=1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(out.join("log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("epoch,"));
    assert!(out.join("summary.json").exists() && out.join("config.json").exists());
}

#[test]
fn non_contractive_step_is_refused() {
    let dir = TempDir::new().unwrap();
    let o = train(&small_config(dir.path()), &dir.path().join("run"), &["--override", "step_fraction=1.2"]);
    assert_single_line_error(&o, 3, "certificate");
}

#[test]
fn engines_agree_on_final_loss() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let final_loss = |engine: &str| {
        let out = dir.path().join(engine);
        let o = train(&cfg, &out, &["--override", &format!("engine={engine}")]);
        assert!(o.status.success(), "{}", stderr(&o));
        let s: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        s["final_test_loss"].as_f64().unwrap()
    };
    let a = final_loss("standard");
    let b = final_loss("memory-efficient");
    assert!((a - b).abs() <= 1e-5 * a.abs(), "{a} vs {b}");
}

#[test]
fn artifacts_are_byte_stable_apart_from_the_timestamp() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        assert!(train(&cfg, &out, &["--shadow-diagnostics"]).status.success());
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["log.csv", "config.json", "residuals.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let strip = |p: &Path| {
        let mut v: Value = serde_json::from_str(&fs::read_to_string(p.join("summary.json")).unwrap()).unwrap();
        assert!(v.as_object_mut().unwrap().remove("generated_at_unix").is_some());
        v
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn gradcheck_config_passes() {
    let cfg = configs().join("gradcheck.json");
    let o = pbnet(&["gradcheck", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn bench_prints_csv() {
    let cfg = configs().join("gradcheck.json");
    let o = pbnet(&["bench", "--config", cfg.to_str().unwrap(), "--override", "inverse_iters=4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "engine,depth,checkpoint_every,peak_stored_states,peak_workspace_states,forward_applications,backward_applications,operator_applications"
    );
    assert_eq!(lines.count(), 12);
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let o = train(&small_config(dir.path()), &dir.path().join("run"), &["--override", "colour=blue"]);
    assert_single_line_error(&o, 2, "config");
}

#[test]
fn wrong_schema_version_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let o = train(&small_config(dir.path()), &dir.path().join("run"), &["--override", "schema_version=99"]);
    assert_single_line_error(&o, 2, "config");
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let o = train(&dir.path().join("nope.toml"), &dir.path().join("run"), &[]);
    assert_single_line_error(&o, 4, "io");
}

#[test]
fn toml_and_json_configs_are_equivalent() {
    let dir = TempDir::new().unwrap();
    let toml_cfg = configs().join("sr-design.toml");
    let json_tree: Value = toml::from_str(&fs::read_to_string(&toml_cfg).unwrap()).unwrap();
    let json_cfg = dir.path().join("sr-design.json");
    fs::write(&json_cfg, serde_json::to_string(&json_tree).unwrap()).unwrap();
    let quick = [
        "--override", "epochs=0", "--override", "image_size=8", "--override", "sr.patch=4",
        "--override", "sr.channels=2", "--override", "unrolls=2",
    ];
    let mut written = Vec::new();
    for (name, cfg) in [("toml", &toml_cfg), ("json", &json_cfg)] {
        let out = dir.path().join(name);
        let o = train(cfg, &out, &quick);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
        written.push(fs::read(out.join("config.json")).unwrap());
    }
    assert_eq!(written[0], written[1]);
}
