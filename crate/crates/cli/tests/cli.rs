use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use acp_core::evalkit::{compute_eer, ScoreSet};

const TINY: &str = r#"{
  "corpus": {
    "n_speakers": 5, "configs_per_speaker": 2, "utterances_per_config": 2,
    "utterance_seconds": [1.5, 2.0], "pretrain_dev_speakers": 2,
    "main": { "train_speakers": 2, "dev_speakers": 2, "eval_speakers": 2,
              "utterances_per_speaker": 2, "spoofs_per_bonafide": 1,
              "utterance_seconds": [1.5, 2.0] }
  },
  "pairs": { "pairs_per_speaker": 6, "dev_pairs_per_speaker": 4 },
  "pre_crop_frames": 40, "main_crop_frames": 40,
  "pre_epochs": 2, "main_epochs": 2, "pre_batch": 4, "main_batch": 4
}"#;

struct Sandbox {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

fn sandbox() -> Sandbox {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut doc: serde_json::Value = serde_json::from_str(TINY).unwrap();
    doc["output_dir"] = serde_json::Value::String(out.to_str().unwrap().into());
    let config = dir.path().join("cfg.json");
    fs::write(&config, doc.to_string()).unwrap();
    Sandbox { _dir: dir, config, out }
}

fn acp(sb: &Sandbox, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_acp"));
    cmd.args(&args[..1]).arg("--config").arg(&sb.config).args(&args[1..]).env("RUST_LOG", "warn");
    cmd.output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_byte_identical_on_rerun() {
    let sb = sandbox();
    ok(&acp(&sb, &["gen-data"]));
    let data = sb.out.join("seed1/data");
    let first = tree(&data);
    assert!(first.iter().any(|(p, _)| p == Path::new("main.tsv")));
    assert!(first.iter().any(|(p, _)| p == Path::new("pretrain.tsv")));
    ok(&acp(&sb, &["gen-data"]));
    assert_eq!(first, tree(&data));
    ok(&acp(&sb, &["gen-data", "--seed", "2"]));
    assert_ne!(first, tree(&sb.out.join("seed2/data")));
}

#[test]
fn two_phase_pipeline_writes_selfconsistent_scores() {
    let sb = sandbox();
    ok(&acp(&sb, &["gen-data"]));
    let stdout = ok(&acp(&sb, &["pretrain"]));
    assert!(stdout.contains("best epoch"));
    let pre = sb.out.join("seed1/pretrain");
    for f in ["best.ckpt", "last.ckpt", "pretrain_log.tsv"] {
        assert!(pre.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(pre.join("pretrain_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let best = pre.join("best.ckpt");
    ok(&acp(&sb, &["train", "--init", best.to_str().unwrap()]));
    let ck = sb.out.join("seed1/train_pretrained/best.ckpt");
    assert!(ck.exists());
    let stdout = ok(&acp(&sb, &["eval", "--checkpoint", ck.to_str().unwrap(), "--split", "eval"]));
    let printed: f64 = stdout.split_whitespace().nth(2).unwrap().parse().unwrap();
    let scores = ScoreSet::load(&sb.out.join("seed1/eval_pretrained/eval_scores.tsv")).unwrap();
    assert!((compute_eer(&scores).unwrap().eer - printed).abs() < 5e-5);
    let det = fs::read_to_string(sb.out.join("seed1/eval_pretrained/eval_det.csv")).unwrap();
    assert!(det.lines().count() > 2);
}

#[test]
fn random_init_training_and_overrides() {
    let sb = sandbox();
    ok(&acp(&sb, &["gen-data"]));
    ok(&acp(&sb, &["train", "--set", "main_epochs=1", "--set", "main_lr=0.001"]));
    let log = fs::read_to_string(sb.out.join("seed1/train_random/train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let shown = ok(&acp(&sb, &["show-config", "--set", "freeze_upto=3"]));
    assert!(shown.contains("\"freeze_upto\": 3"));
}

#[test]
fn failures_map_to_documented_exit_codes() {
    let sb = sandbox();
    // config errors
    assert_eq!(code(&acp(&sb, &["pretrain"])), 1, "missing manifest");
    assert_eq!(code(&acp(&sb, &["gen-data", "--set", "no_such_key=1"])), 1);
    assert_eq!(code(&acp(&sb, &["gen-data", "--set", "pre_batch=0"])), 1);
    assert_eq!(code(&acp(&sb, &["grid", "--axis", "sideways"])), 1);
    assert_eq!(code(&acp(&sb, &["frobnicate"])), 1);

    ok(&acp(&sb, &["gen-data"]));
    // data errors
    let missing = acp(&sb, &["eval", "--checkpoint", "/nonexistent/best.ckpt"]);
    assert_eq!(code(&missing), 2);
    assert_eq!(code(&acp(&sb, &["train", "--init", "/nonexistent.ckpt"])), 2);
    let junk = sb.out.join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&acp(&sb, &["train", "--init", junk.to_str().unwrap()])), 2);
    let blocker = sb.out.join("file");
    fs::write(&blocker, b"x").unwrap();
    let unwritable = acp(&sb, &["gen-data", "--set", &format!("output_dir={}", blocker.join("sub").display())]);
    assert_ne!(code(&unwritable), 0);
    assert!(!unwritable.stderr.is_empty());

    // an incompatible checkpoint names the offending layer
    ok(&acp(&sb, &["pretrain"]));
    let best = sb.out.join("seed1/pretrain/best.ckpt");
    let wide = acp(&sb, &["train", "--init", best.to_str().unwrap(), "--set", "net.conv1_channels=6"]);
    assert_eq!(code(&wide), 1);
    assert!(String::from_utf8_lossy(&wide.stderr).contains("l00_conv2d"));
}

#[test]
fn init_mode_grid_writes_one_row_per_cell() {
    let sb = sandbox();
    let stdout = ok(&acp(&sb, &["grid", "--axis", "init-mode", "--set", "main_epochs=1", "--set", "pre_epochs=1"]));
    assert!(stdout.starts_with("init-mode"));
    let csv = fs::read_to_string(sb.out.join("grid_init-mode/results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "init,dev_eer,eval_eer,runs,failures");
    assert_eq!(lines.len(), 4);
    for row in &lines[1..] {
        let eer = row.split(',').nth(2).unwrap();
        assert_eq!(eer.split('.').nth(1).unwrap().len(), 4, "{row}");
    }
}
