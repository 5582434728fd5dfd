use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 1

[data.synthetic]
root = "data"
samples_per_domain = 6
image_size = [32, 32]

[agm.model]
encoder_channels = [8, 16, 32]
input_size = [32, 32]

[agm.optim]
iterations = 3

[segmenter.model]
image_size = [32, 32]
encoder_channels = [4, 8, 16]
tap_channels = [32, 16, 8]

[segmenter.model.ipef]
fused_channels = [32, 16, 8]

[segmenter.optim]
iterations = 3

[eval]
overlays_per_domain = 1

[ablation]
positions = ["0-1", "2"]

[output]
dir = "out"
"#;

fn sdgseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdgseg"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(out.status.success(), "status {:?}\nstdout {stdout}\nstderr {}", out.status, String::from_utf8_lossy(&out.stderr));
    stdout
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn full_chain_runs_and_writes_metrics() {
    let dir = setup();
    let d = dir.path();
    let c = ["--config", "tiny.toml"];
    let run = |sub: &str, extra: &[&str]| ok(&sdgseg(d, &[&[sub][..], &c, extra].concat()));
    assert!(run("synth-data", &[]).contains("manifest.toml"));
    let out = run("train-agm", &["--sufm", "off"]);
    assert!(out.contains("source-test Dice"), "{out}");
    let out = run("gen-prompts", &[]);
    assert_eq!(out.lines().filter(|l| l.contains("fallbacks")).count(), 3, "{out}");
    run("finetune", &["--ipef", "off"]);
    let out = run("eval", &[]);
    assert!(out.contains("target average"), "{out}");
    let metrics = std::fs::read_to_string(d.join("out/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    assert!(d.join("out/overlays/target_a/target_a_0000.png").exists());

    run("eval", &["--use-gt-boxes", "--jitter", "1.5", "0.1", "--domain", "target_b"]);
    let metrics = std::fs::read_to_string(d.join("out/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let fresh = sdgseg(d, &["eval", "--config", "tiny.toml", "--use-gt-boxes", "--output", "fresh"]);
    assert_eq!(fresh.status.code(), Some(2), "a fresh output directory has no segmenter");
}

#[test]
fn ablation_writes_a_table() {
    let dir = setup();
    let d = dir.path();
    ok(&sdgseg(d, &["synth-data", "--config", "tiny.toml"]));
    let out = ok(&sdgseg(d, &["ablate", "--config", "tiny.toml", "--axis", "position"]));
    assert!(out.contains("preliminary prediction"), "{out}");
    let table = std::fs::read_to_string(d.join("out/ablation_position.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn user_errors_exit_with_two() {
    let dir = setup();
    let d = dir.path();
    let missing = sdgseg(d, &["train-agm", "--config", "tiny.toml"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("synth-data"));
    assert_eq!(sdgseg(d, &["eval", "--config", "absent.toml"]).status.code(), Some(2));
    assert_eq!(sdgseg(d, &["ablate", "--config", "tiny.toml", "--axis", "colour"]).status.code(), Some(2));
    assert_eq!(sdgseg(d, &["synth-data", "--config", "tiny.toml", "--jitter", "0", "0.1"]).status.code(), Some(2));
    std::fs::write(d.join("bad.toml"), "[data.synthetic]\nsamples_per_domain = 0\n").unwrap();
    assert_eq!(sdgseg(d, &["synth-data", "--config", "bad.toml"]).status.code(), Some(2));
}

#[test]
fn seed_override_changes_the_dataset() {
    let dir = setup();
    let d = dir.path();
    ok(&sdgseg(d, &["synth-data", "--config", "tiny.toml", "--output", "x"]));
    let a = std::fs::read(d.join("data/source/images/source_0000.png")).unwrap();
    ok(&sdgseg(d, &["synth-data", "--config", "tiny.toml", "--seed", "2"]));
    let b = std::fs::read(d.join("data/source/images/source_0000.png")).unwrap();
    assert_ne!(a, b);
}
