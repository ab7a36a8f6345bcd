use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
size = 16
n_train = 8
n_validation = 4
n_test_healthy = 4
n_disease = 4

[ae]
image_size = 16
channels = [4, 8]
latent_channels = 2

[backbone]
n_blocks = 2
n_heads = 2
dim = 16

[train_ae]
max_steps = 10
eval_every = 5

[train_ddpm]
max_steps = 10
eval_every = 5
batch_size = 2
"#;

fn cadd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cadd")).args(args).output().expect("spawn cadd")
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    for flag in ["--help", "--version"] {
        assert_eq!(cadd(&[flag]).status.code(), Some(0), "{flag}");
    }
}

#[test]
fn usage_errors_exit_one() {
    for args in [&["frobnicate"][..], &["train"], &["train", "--stage", "vae"], &["restore", "--mode", "best"]] {
        let o = cadd(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn show_config_applies_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = cadd(&["--config", &cfg, "--seed", "7", "--out", "elsewhere", "show-config"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("seed = 7"));
    assert!(text.contains("out_dir = \"elsewhere\""));
    assert!(text.contains("size = 16"));
}

#[test]
fn bad_config_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "[restoration]\nstride = 4\n").unwrap();
    let o = cadd(&["--config", p.to_str().unwrap(), "show-config"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));

    let o = cadd(&["--config", dir.path().join("missing.toml").to_str().unwrap(), "show-config"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn stages_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    let o = cadd(&["--out", out, "train", "--stage", "ae"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = cadd(&["--out", out, "evaluate"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let base = ["--config", cfg.as_str(), "--out", out.to_str().unwrap()];
    let step = |args: &[&str]| {
        let all: Vec<&str> = base.iter().copied().chain(args.iter().copied()).collect();
        let o = cadd(&all);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    };
    assert!(step(&["gen-data"]).contains("wrote 20 subjects"));

    // A second gen-data must not clobber existing data.
    let all: Vec<&str> = base.iter().copied().chain(["gen-data"]).collect();
    let o = cadd(&all);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    step(&["--force", "gen-data"]);

    step(&["train", "--stage", "ae"]);
    step(&["train", "--stage", "ddpm"]);
    assert!(out.join("ae_log.csv").exists() && out.join("ddpm_log.csv").exists());

    // Restoring with a calibration missing is an input problem, not a crash.
    let all: Vec<&str> = base.iter().copied().chain(["restore"]).collect();
    assert_eq!(cadd(&all).status.code(), Some(1));

    step(&["calibrate"]);
    assert!(step(&["restore"]).contains("restored 8 subjects"));
    let report = step(&["evaluate"]);
    assert!(report.starts_with("restoration mode: cadd"), "{report}");
    assert!(report.contains("MAE-top1%"));
    let scores = std::fs::read_to_string(out.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 9);

    // Evaluating plain restorations against a cadd calibration is refused.
    step(&["restore", "--mode", "plain", "--cohort", "test-healthy"]);
    let all: Vec<&str> = base.iter().copied().chain(["evaluate", "--mode", "plain"]).collect();
    assert_eq!(cadd(&all).status.code(), Some(1));
}
