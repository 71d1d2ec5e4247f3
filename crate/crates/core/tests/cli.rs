use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use embednoise::cli::run_cli;
use embednoise::config::RunConfig;
use embednoise::io::read_report;
use embednoise::pipeline::Manifest;
use embednoise::trainer::load_checkpoint;

const TINY: &str = r#"
seed = 3
out_dir = "out"

[model]
image_height = 16
image_width = 16
embed_dim = 8
grid_channels = 4
hidden_channels = 3
primary = { kind = "toy", seed = 1 }

[pretrain]
data = { kind = "synthetic", count = 24, seed = 1 }
[pretrain.train]
batch_size = 8
k = 2
steps = 4
learning_rate = 0.001

[finetune]
data = { kind = "synthetic", count = 16, seed = 1 }
external = { kind = "synthetic", count = 16, seed = 3 }
[finetune.train]
batch_size = 8
epochs = 1

[attack]
targets = { kind = "synthetic", count = 12, seed = 2 }
cleans = { kind = "synthetic", count = 24, seed = 3 }

[eval]
distractors = { kind = "synthetic", count = 10, seed = 4 }
"#;

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_embednoise"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn selftest_on_bundled_config_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["selftest", "--out", "st"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("selftest: 9/9 invariant checks passed"), "{text}");
    assert!(dir.path().join("st/selftest.manifest.json").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bin(&["pretrain", "--bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(bin(&["launch"], dir.path()).status.code(), Some(2));
    let missing = bin(&["pretrain"], dir.path());
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("error[config]"));
    fs::write(dir.path().join("bad.toml"), format!("{TINY}\nunknown_key = 1\n")).unwrap();
    let bad = bin(&["pretrain", "--config", "bad.toml"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("error[config]"));
}

#[test]
fn attack_with_mismatched_checkpoint_reports_shape_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.toml"), TINY).unwrap();
    assert_eq!(bin(&["pretrain", "--config", "a.toml", "--out", "run"], dir.path()).status.code(), Some(0));
    let wider = TINY
        .replace("embed_dim = 8", "embed_dim = 6")
        .replace("[attack]\n", "[attack]\ncheckpoint = \"run/pretrain.ckpt\"\n");
    fs::write(dir.path().join("b.toml"), wider).unwrap();
    let out = bin(&["attack", "--config", "b.toml", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("error[shape]"), "{}", stderr(&out));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.toml"), TINY).unwrap();
    let out = bin(&["attack", "--config", "a.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("error[load]"));
}

#[test]
fn full_pipeline_produces_fingerprinted_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    fs::write(&cfg_path, TINY).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    for cmd in ["pretrain", "finetune", "attack", "eval"] {
        assert_eq!(run_cli(["embednoise", cmd, "--config", cfg, "--seed", "5"]), 0, "{cmd}");
    }
    let mut config = RunConfig::from_file(&cfg_path).unwrap();
    config.seed = 5;
    let fp = config.fingerprint();
    let out = dir.path().join("out");

    for name in ["pretrain.ckpt", "finetune.ckpt"] {
        assert_eq!(load_checkpoint(&out.join(name)).unwrap().config_fingerprint, fp);
    }
    let index = fs::read_to_string(out.join("attack/index.tsv")).unwrap();
    assert!(index.starts_with(&format!("# config_fingerprint {fp}")));
    assert_eq!(fs::read_dir(out.join("attack")).unwrap().count(), 13);

    let report = read_report(&out.join("eval.json")).unwrap();
    assert_eq!(report.metadata.config_fingerprint, fp);
    let row = report.retrieval_row();
    assert!(row.iter().all(|v| (0.0..=100.0).contains(v)));
    assert!((report.r_mean - row.iter().sum::<f64>() / 6.0).abs() < 1e-12);
    assert!(fs::read_to_string(out.join("eval.csv")).unwrap().contains(&fp));

    for cmd in ["pretrain", "finetune", "attack", "eval"] {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(out.join(format!("{cmd}.manifest.json"))).unwrap()).unwrap();
        assert_eq!(m.config_fingerprint, fp);
        assert_eq!(m.seed, 5);
        assert!(m.timings_secs.contains_key("total"));
        assert!(m.versions.contains_key("embednoise"));
    }
    let log = fs::read_to_string(out.join("pretrain-loss.tsv")).unwrap();
    assert_eq!(log.lines().count(), 5);
}
