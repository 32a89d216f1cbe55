use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn a3mda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_a3mda")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_reports_and_succeeds() {
    let o = a3mda(&["gradcheck", "--seed", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let last = out.lines().last().unwrap();
    assert!(last.starts_with("max relative error "), "{out}");
    let worst: f64 = last.trim_start_matches("max relative error ").parse().unwrap();
    assert!(worst <= 1e-4);
}

#[test]
fn missing_config_names_the_file() {
    let o = a3mda(&["train", "--config", "does/not/exist.toml"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("does/not/exist.toml"), "{}", stderr(&o));
}

#[test]
fn gen_train_eval_snapshot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let task_dir = dir.path().join("task");
    let spec = dir.path().join("spec.toml");
    fs::write(
        &spec,
        r#"dim = 2
classes = 3
seed = 4

[base]
kind = "gaussian-mixture"
radius = 2.0
std = 0.3

[[domains]]
role = "source"
rotation_deg = 0.0
samples_per_class = 32

[[domains]]
role = "source"
rotation_deg = 15.0
samples_per_class = 32

[[domains]]
role = "target"
rotation_deg = 30.0
samples_per_class = 32
"#,
    )
    .unwrap();
    let o = a3mda(&["gen", "--out", s(&task_dir), "--spec", s(&spec)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = task_dir.join("task.toml");
    assert!(manifest.exists());

    let config = dir.path().join("config.toml");
    fs::write(
        &config,
        format!("epochs = 2\nbatch_size = 16\n\n[task]\nmanifest = {:?}\n", s(&manifest)),
    )
    .unwrap();
    let run = dir.path().join("run");
    let o = a3mda(&["train", "--config", s(&config), "--seed", "3", "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("weighted"));
    let checkpoint = run.join("model.ckpt");
    assert!(checkpoint.exists());
    assert!(run.join("metrics.csv").exists());

    for mode in ["weighted", "average", "source-1"] {
        let o = a3mda(&["eval", "--checkpoint", s(&checkpoint), "--config", s(&config), "--mode", mode]);
        assert!(o.status.success(), "{mode}: {}", stderr(&o));
        assert!(stdout(&o).contains(&format!("mode {mode} accuracy")), "{}", stdout(&o));
    }
    let o = a3mda(&["eval", "--checkpoint", s(&checkpoint), "--config", s(&config), "--mode", "source-7"]);
    assert!(!o.status.success());

    let csv = dir.path().join("hardness.csv");
    let o = a3mda(&["snapshot-hardness", "--checkpoint", s(&checkpoint), "--out", s(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = fs::read_to_string(&csv).unwrap().lines().count();
    assert_eq!(rows, 1 + 3 * 96);
}
