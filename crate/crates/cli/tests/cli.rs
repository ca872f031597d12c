use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_factor-ood"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn factor-ood")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#"
seed = 0

[data.generator]
height = 8
width = 8
train_per_partition = 16
calib_per_partition = 6
test_per_side = 24

[model]
height = 8
width = 8
latent_size = 8
conv_depths = [2]
dense_widths = [8]

[training]
epochs = 1
batch_size = 4
holdout_fraction = 0.25
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn digest_line(o: &Output) -> String {
    stdout(o).lines().find(|l| l.starts_with("manifest sha256:")).expect("digest line").to_string()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["gen-data"]).status.code(), Some(1));
    assert_eq!(run(&["reason"]).status.code(), Some(1));
    assert_eq!(run(&["gen-data", "--config", "/nonexistent/run.toml"]).status.code(), Some(1));
}

#[test]
fn invalid_config_exits_1_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    let bad_key = write_config(dir.path(), "bogus = 3\n");
    let o = run(&["gen-data", "--config", &bad_key, "--out-dir", out_s]);
    assert_eq!(o.status.code(), Some(1));
    let bad_dims = write_config(dir.path(), &format!("{SMALL}\n[[rules.factors]]\nname = \"scene\"\ndims = [9]\n"));
    for cmd in ["gen-data", "train", "calibrate", "evaluate"] {
        let o = run(&[cmd, "--config", &bad_dims, "--out-dir", out_s]);
        assert_eq!(o.status.code(), Some(1), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(!out.exists());
}

#[test]
fn train_before_gen_data_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = run(&["train", "--config", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gen-data"));
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    assert!(run(&["gen-data", "--config", &cfg, "--out-dir", out_s]).status.success());
    assert_eq!(run(&["calibrate", "--config", &cfg, "--out-dir", out_s]).status.code(), Some(2));
}

#[test]
fn gen_data_digest_is_reproducible_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = run(&["gen-data", "--config", &cfg, "--out-dir", dir.path().join("a").to_str().unwrap()]);
    let b = run(&["gen-data", "--config", &cfg, "--out-dir", dir.path().join("b").to_str().unwrap(), "--deterministic"]);
    let c = run(&["gen-data", "--config", &cfg, "--out-dir", dir.path().join("c").to_str().unwrap(), "--seed", "7"]);
    assert!(a.status.success() && b.status.success() && c.status.success());
    assert_eq!(digest_line(&a), digest_line(&b));
    assert_ne!(digest_line(&a), digest_line(&c));
    assert!(stdout(&a).contains("train: 64 samples"));
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    let step = |args: &[&str]| {
        let mut all = args.to_vec();
        all.extend(["--config", &cfg, "--out-dir", out_s]);
        let o = run(&all);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    step(&["gen-data"]);
    let t = step(&["train", "--epochs", "2"]);
    assert!(stdout(&t).contains("epochs run: 2"));
    let bytes = fs::read(out.join("model.bin")).unwrap();
    let c = step(&["calibrate"]);
    assert_eq!(stdout(&c).lines().filter(|l| l.starts_with("reasoner:")).count(), 2);
    let e = step(&["evaluate"]);
    assert!(stdout(&e).contains("auroc"));
    assert!(out.join("report/report.json").is_file());

    step(&["train", "--epochs", "2"]);
    assert_eq!(fs::read(out.join("model.bin")).unwrap(), bytes, "training is not reproducible");

    let imgs = out.join("data/images/calib");
    let n = fs::read_dir(&imgs).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    let bogus = dir.path().join("bogus.png");
    fs::write(&bogus, b"nope").unwrap();
    let r = run(&[
        "reason",
        "--checkpoint",
        out.join("model.bin").to_str().unwrap(),
        "--reasoner",
        out.join("reasoners/streak.json").to_str().unwrap(),
        "--reasoner",
        out.join("reasoners/scene.json").to_str().unwrap(),
        imgs.to_str().unwrap(),
        bogus.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(0));
    let text = stdout(&r);
    assert_eq!(text.lines().count(), n + 1);
    assert_eq!(text.lines().filter(|l| l.contains("error:")).count(), 1);
    assert!(text.lines().filter(|l| !l.contains("error:")).all(|l| l.contains("streak density=") && l.contains("scene density=")));
}
