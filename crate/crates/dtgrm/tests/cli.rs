//! Black-box tests of the command-line binary: dataset generation,
//! training, evaluation, gradient checking and ablation, exercised on a
//! deliberately tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dtgrm"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn dtgrm");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY_CONFIG: &str = r#"
epochs = 2
val_every = 1
seed = 7
n_train = 3
n_test = 2

[backbone]
d_hidden = 8
num_layers = 2

[dtgrm]
d_hidden = 8
num_levels = 2
num_stages = 1

[data]
num_classes = 3
d_in = 6
min_segments = 2
max_segments = 3
min_segment_len = 5
max_segment_len = 12
seed = 7
"#;

struct Workspace {
    _dir: tempfile::TempDir,
    config: PathBuf,
    root: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().expect("workspace dir");
    let config = dir.path().join("run.toml");
    std::fs::write(&config, TINY_CONFIG).expect("write config");
    let root = dir.path().to_path_buf();
    Workspace { _dir: dir, config, root }
}

fn gen_data(ws: &Workspace) -> PathBuf {
    let data = ws.root.join("data");
    run_ok(bin()
        .arg("gen-data")
        .arg("--config")
        .arg(&ws.config)
        .arg("--out")
        .arg(&data));
    data
}

fn train(ws: &Workspace, data: &Path, out: &str) -> (PathBuf, String) {
    let run_dir = ws.root.join(out);
    let output = run_ok(bin()
        .arg("train")
        .arg("--config")
        .arg(&ws.config)
        .arg("--data")
        .arg(data)
        .arg("--out")
        .arg(&run_dir));
    (run_dir, stdout_of(&output))
}

#[test]
fn gen_data_train_eval_round_trip() {
    let ws = workspace();
    let data = gen_data(&ws);
    assert!(data.join("manifest.txt").is_file());
    let manifest = std::fs::read_to_string(data.join("manifest.txt")).unwrap();
    assert!(manifest.contains("classes = 3"));
    assert_eq!(manifest.matches("\ntrain ").count() + usize::from(manifest.starts_with("train ")), 3);
    assert_eq!(manifest.matches("\ntest ").count(), 2);

    let (run_dir, train_out) = train(&ws, &data, "run");
    assert!(train_out.contains("[backbone]"));
    assert!(train_out.contains("[stage1]"));
    assert!(train_out.contains("best final-stage edit"));
    assert!(run_dir.join("best.ckpt").is_file());

    let log = std::fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).expect("log line parses"))
        .collect();
    let epochs: Vec<&serde_json::Value> =
        records.iter().filter(|r| r["kind"] == "epoch").collect();
    assert_eq!(epochs.len(), 2);
    for e in &epochs {
        assert!(e["total"].as_f64().unwrap().is_finite());
    }
    // val_every = 1 and two stages reporting: 2 epochs x 2 reports
    assert_eq!(records.iter().filter(|r| r["kind"] == "validation").count(), 4);

    let eval_dir = ws.root.join("eval");
    let eval_out = run_ok(bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(run_dir.join("last.ckpt"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&eval_dir)
        .arg("--timelines"));
    assert!(stdout_of(&eval_out).contains("checkpoint epoch 2"));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("eval_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["checkpoint_epoch"], 2);
    assert_eq!(report["split"], "test");
    let stages = report["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 2);
    assert_eq!(stages[0]["stage"], "backbone");
    assert_eq!(stages[1]["stage"], "stage1");
    for s in stages {
        assert!(s["acc"].as_f64().unwrap().is_finite());
        assert!(s["edit"].as_f64().unwrap().is_finite());
    }

    let timelines: Vec<PathBuf> = std::fs::read_dir(&eval_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "svg"))
        .collect();
    assert_eq!(timelines.len(), 2);
    for t in timelines {
        assert!(std::fs::read_to_string(t).unwrap().contains("<svg"));
    }
}

#[test]
fn repeated_runs_write_identical_checkpoints_and_reports() {
    let ws = workspace();
    let data = gen_data(&ws);

    let (run_dir, _) = train(&ws, &data, "run");
    let first_ckpt = std::fs::read(run_dir.join("last.ckpt")).unwrap();
    let eval = |out: &str| {
        let eval_dir = ws.root.join(out);
        run_ok(bin()
            .arg("eval")
            .arg("--checkpoint")
            .arg(run_dir.join("last.ckpt"))
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&eval_dir));
        std::fs::read(eval_dir.join("eval_report.json")).unwrap()
    };
    let first_report = eval("eval1");

    // same output directory: config (and so checkpoint bytes) identical
    let (_, _) = train(&ws, &data, "run");
    assert_eq!(std::fs::read(run_dir.join("last.ckpt")).unwrap(), first_ckpt);
    assert_eq!(eval("eval2"), first_report);
}

#[test]
fn gradcheck_passes_and_corrupt_fixture_fails() {
    let out = run_ok(bin().arg("gradcheck"));
    let text = stdout_of(&out);
    assert!(text.contains("composed model"));
    assert!(!text.contains("FAIL"));

    let bad = bin()
        .arg("gradcheck")
        .arg("--corrupt-fixture")
        .output()
        .expect("spawn dtgrm");
    assert!(!bad.status.success());
    assert!(stdout_of(&bad).contains("FAIL"));
}

#[test]
fn eval_rejects_unknown_split() {
    let ws = workspace();
    let data = gen_data(&ws);
    let (run_dir, _) = train(&ws, &data, "run");

    let out = bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(run_dir.join("last.ckpt"))
        .arg("--data")
        .arg(&data)
        .arg("--split")
        .arg("validation")
        .output()
        .expect("spawn dtgrm");
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown split"));
}

#[test]
fn ablation_trains_once_per_value_and_prints_a_table() {
    let ws = workspace();
    let data = gen_data(&ws);
    let out_dir = ws.root.join("ablation");
    let out = run_ok(bin()
        .arg("ablate")
        .arg("--config")
        .arg(&ws.config)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&out_dir)
        .arg("num_stages")
        .arg("0")
        .arg("2"));
    let table = stdout_of(&out);
    assert!(table.contains("num_stages"));
    assert!(out_dir.join("num_stages-0").join("last.ckpt").is_file());
    assert!(out_dir.join("num_stages-2").join("last.ckpt").is_file());
}
