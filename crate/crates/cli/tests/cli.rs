use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const RUN_CONFIG: &str = r#"
seed = 3

[backbone.synthetic]
classes = 4
width = 8
depth = 1
samples_per_class = 10
noise = 0.05
seed = 1

[federation]
clients = 2
rounds = 3
lr = 0.3
local_batch = 4
prompt_len = 2

[sweep]
trainers = ["promptfl", "scratch"]
"#;

fn fpl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpl")).current_dir(dir).env_remove("FPL_OUT_DIR").args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn workspace_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(fpl(tmp.path(), &[]).status.code(), Some(2));
    assert_eq!(fpl(tmp.path(), &["run"]).status.code(), Some(2));
    let missing = fpl(tmp.path(), &["run", "--config", "absent.toml"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("absent.toml"));

    let bad = write_config(tmp.path(), "bad.toml", &RUN_CONFIG.replace("rounds = 3", "rounds = 3\nspeed = 9"));
    let o = fpl(tmp.path(), &["run", "--config", &bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.toml:15"), "{}", stderr(&o));
}

#[test]
fn cost_preset_prints_both_scenarios() {
    let tmp = tempfile::tempdir().unwrap();
    let table = workspace_config("device_cost.toml");
    let o = fpl(tmp.path(), &["cost", "--config", table.to_str().unwrap(), "--out", "cost"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("one-time 600.00 MB, 88.9 s"), "{text}");
    assert!(text.contains("9.05 h"), "{text}");
    assert!(text.contains("3.7632e14"), "{text}");
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("cost/cost.json")).unwrap()).unwrap();
    assert!(json.is_array() || json.is_object());
    assert!(tmp.path().join("cost/manifest.json").exists());
}

#[test]
fn runs_are_deterministic_and_refuse_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", RUN_CONFIG);
    for out in ["a", "b"] {
        let o = fpl(tmp.path(), &["run", "--config", &cfg, "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("a/manifest.json")).unwrap()).unwrap();
    let cells = manifest["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 2);
    for cell in cells {
        let dir = cell["dir"].as_str().unwrap();
        let a = fs::read(tmp.path().join("a").join(dir).join("metrics.csv")).unwrap();
        let b = fs::read(tmp.path().join("b").join(dir).join("metrics.csv")).unwrap();
        assert_eq!(a, b);
    }

    let again = fpl(tmp.path(), &["run", "--config", &cfg, "--out", "a"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"));
    let forced = fpl(tmp.path(), &["run", "--config", &cfg, "--out", "a", "--force", "--seed-override", "8"]);
    assert!(forced.status.success(), "{}", stderr(&forced));
    let reseeded: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(reseeded["seed"], 8);
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "envrun.toml", RUN_CONFIG);
    let root = tmp.path().join("results");
    let o = Command::new(env!("CARGO_BIN_EXE_fpl"))
        .current_dir(tmp.path())
        .env("FPL_OUT_DIR", &root)
        .args(["run", "--config", &cfg])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(root.join("envrun/manifest.json").exists());

    let o = fpl(tmp.path(), &["run", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("runs/envrun/manifest.json").exists());
}

#[test]
fn generated_backbone_feeds_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = workspace_config("gen.toml");
    let o = fpl(tmp.path(), &["gen", "--config", gen.to_str().unwrap(), "--out", "bb"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let file = tmp.path().join("bb/backbone.fplb");
    assert!(file.exists());
    assert!(tmp.path().join("bb/backbone.json").exists());

    let body = "[backbone]\npath = \"bb/backbone.fplb\"\n\n[federation]\nclients = 2\nrounds = 2\nprompt_len = 2\n";
    let cfg = write_config(tmp.path(), "from_file.toml", body);
    let o = fpl(tmp.path(), &["run", "--config", &cfg, "--out", "r"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("final accuracy"));

    let again = fpl(tmp.path(), &["gen", "--config", gen.to_str().unwrap(), "--out", "bb"]);
    assert_eq!(again.status.code(), Some(2));
}
