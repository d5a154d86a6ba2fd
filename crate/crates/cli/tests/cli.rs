use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_memefusion"));
    cmd.env_remove("MEMEFUSION_SEED");
    cmd
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mock_config() -> PathBuf {
    repo().join("configs/mock_synthetic.json")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn value<'a>(out: &'a str, key: &str) -> Option<&'a str> {
    out.lines().find_map(|l| l.strip_prefix(&format!("{key}=")))
}

fn dir_hash(dir: &Path) -> String {
    let mut files: Vec<PathBuf> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&f).unwrap());
    }
    hex::encode(h.finalize())
}

/// Trains the mock config once into `dir` and returns the final checkpoint path.
fn trained(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("run");
    let cfg = mock_config();
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("final")
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = run(&["synth", "--n", "16", "--seed", "0", "--out", d.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(value(&stdout(&o), "seed"), Some("0"));
    }
    assert_eq!(dir_hash(&a), dir_hash(&b));
    assert_eq!(fs::read_to_string(a.join("train.jsonl")).unwrap().lines().count(), 11);
}

#[test]
fn train_all_writes_both_checkpoints_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let fin = trained(dir.path(), &["--stage", "all"]);
    assert!(start.elapsed() < Duration::from_secs(60));
    assert!(fin.join("manifest.json").is_file());
    assert!(dir.path().join("run/stage1/manifest.json").is_file());
    assert!(dir.path().join("run/train_log.jsonl").is_file());
    let echoed = fs::read_to_string(dir.path().join("run/config.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(fin.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"], serde_json::from_str::<serde_json::Value>(&echoed).unwrap());
}

#[test]
fn seed_flag_changes_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = mock_config();
    let hash = |seed: &str, sub: &str| {
        let out = dir.path().join(sub);
        let o = run(&[
            "train", "--config", cfg.to_str().unwrap(), "--stage", "1", "--seed", seed, "--out", out.to_str().unwrap(),
            "data.n=64",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("stage1/manifest.json")).unwrap()).unwrap();
        let h = manifest["config_hash"].as_str().unwrap().to_string();
        assert_eq!(value(&stdout(&o), "config_hash"), Some(h.as_str()));
        h
    };
    assert_ne!(hash("1", "a"), hash("2", "b"));
}

#[test]
fn missing_data_root_is_exit_two_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--out", dir.path().to_str().unwrap(), "data.source=\"hmc\""]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.root"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--out", dir.path().to_str().unwrap(), "train.stage2.learning_rate=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn stage_two_without_init_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--stage", "2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_is_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "train", "--out", dir.path().to_str().unwrap(), "data.n=64", "train.stage1.lr=1e300", "train.grad_clip=1e300",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn eval_reports_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let fin = trained(dir.path(), &[]);
    let mut reports = Vec::new();
    for k in 0..2 {
        let path = dir.path().join(format!("report{k}.json"));
        let o = run(&["eval", "--checkpoint", fin.to_str().unwrap(), "--split", "test_unseen", "--out", path.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        let out = stdout(&o);
        assert!(value(&out, "accuracy").is_some() && value(&out, "auroc").is_some());
        reports.push(fs::read(&path).unwrap());
        assert!(path.with_extension("roc.csv").is_file());
    }
    assert_eq!(reports[0], reports[1]);
    let json: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    assert!(json["accuracy"].is_number() && json["auroc"].is_number());
    assert!(json["config_hash"].is_string());

    let csv = dir.path().join("report.csv");
    let o = run(&["eval", "--checkpoint", fin.to_str().unwrap(), "--format", "csv", "--out", csv.to_str().unwrap()]);
    assert!(o.status.success());
    let n: usize = value(&stdout(&o), "n").unwrap().parse().unwrap();
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), n + 1);
}

#[test]
fn eval_on_unlabeled_split_advises_predict() {
    let dir = tempfile::tempdir().unwrap();
    let fin = trained(dir.path(), &[]);
    let data = dir.path().join("data");
    let o = run(&["synth", "--n", "16", "--seed", "1", "--out", data.to_str().unwrap()]);
    assert!(o.status.success());
    let test = data.join("test_unseen.jsonl");
    let stripped: Vec<String> = fs::read_to_string(&test)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("label");
            v.to_string()
        })
        .collect();
    fs::write(&test, stripped.join("\n")).unwrap();
    let o = run(&[
        "eval", "--checkpoint", fin.to_str().unwrap(), "--split", "test_unseen",
        "data.source=\"hmc\"", &format!("data.root={:?}", data.to_str().unwrap()),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("predict"));
}

#[test]
fn corrupt_checkpoint_is_exit_four() {
    let dir = tempfile::tempdir().unwrap();
    let fin = trained(dir.path(), &[]);
    let blob = fin.join("tensors.bin");
    let mut bytes = fs::read(&blob).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&blob, bytes).unwrap();
    let o = run(&["eval", "--checkpoint", fin.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn predict_output_contract() {
    let dir = tempfile::tempdir().unwrap();
    let fin = trained(dir.path(), &[]);
    let data = dir.path().join("data");
    assert!(run(&["synth", "--n", "4", "--seed", "0", "--out", data.to_str().unwrap()]).status.success());
    let image = fs::read_dir(data.join("img")).unwrap().next().unwrap().unwrap().path();
    for text in ["thunder riot smoke", ""] {
        let o = run(&["predict", "--checkpoint", fin.to_str().unwrap(), "--image", image.to_str().unwrap(), "--text", text]);
        assert!(o.status.success(), "{}", stderr(&o));
        let out = stdout(&o);
        let line = out.lines().next().unwrap();
        let (score, verdict) = line.split_once(' ').unwrap();
        let score: f64 = score.strip_prefix("score=").unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&score));
        let verdict = verdict.strip_prefix("verdict=").unwrap();
        assert_eq!(verdict, if score >= 0.5 { "hateful" } else { "not-hateful" });
    }

    let o = run(&["predict", "--checkpoint", fin.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let bogus = dir.path().join("not-an-image.png");
    fs::write(&bogus, b"definitely not a png").unwrap();
    let o = run(&["predict", "--checkpoint", fin.to_str().unwrap(), "--image", bogus.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn ablate_emits_four_row_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablate");
    let cfg = mock_config();
    let o = run(&["ablate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "data.n=256"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("table.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let main_hash = value(&stdout(&o), "config_hash").unwrap().to_string();
    assert!(csv.lines().nth(4).unwrap().ends_with(&main_hash));
    for k in 1..=4 {
        assert!(out.join(format!("row{k}/final/manifest.json")).is_file());
    }
}

#[test]
fn baselines_emit_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("baselines");
    let o = run(&["baselines", "--out", out.to_str().unwrap(), "data.n=256", "train.stage2.lr=1e-3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("row=")).count(), 4);
    assert!(out.join("table.md").is_file());
}

#[test]
fn convert_weights_rejects_truncated_source() {
    let dir = tempfile::tempdir().unwrap();
    let src = repo().join("crates/core/tests/fixtures/tiny_clip/model.safetensors");
    let bytes = fs::read(&src).unwrap();
    let cut = dir.path().join("model.safetensors");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let o = run(&[
        "convert-weights", "--kind", "clip-hf", "--input", cut.to_str().unwrap(), "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn pretrained_pipeline_on_converted_tiny_clip() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = repo().join("crates/core/tests/fixtures/tiny_clip");
    let archive = dir.path().join("clip");
    let o = run(&[
        "convert-weights", "--kind", "clip-hf", "--input", fixture.join("model.safetensors").to_str().unwrap(), "--out",
        archive.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("run");
    let o = run(&[
        "train", "--out", out.to_str().unwrap(), "backbone.kind=\"pretrained\"",
        &format!("backbone.archive={:?}", archive.to_str().unwrap()), "model.p=16", "data.n=64",
        "train.stage1.epochs=1", "train.stage2.epochs=1", "train.stage1.batch_size=16", "train.stage2.batch_size=16",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["eval", "--checkpoint", out.join("final").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(value(&stdout(&o), "n"), Some("13"));
}
