use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crowdformer::checkpoint::Checkpoint;
use crowdformer::data::load_manifest;
use crowdformer::optim::TrainState;
use crowdformer::{CrowdFormer, RunConfig, Tensor};
use crowdformer_cli::{cmd_cross_eval, cmd_gen_synth, cmd_gradcheck, cmd_train, TrainArgs, CHECKPOINT_FILE, LOSS_LOG_FILE};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crowdformer"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_cfg() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.cfg")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
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

fn short_train(dir: &Path, data: &Path, epochs: usize) -> PathBuf {
    cmd_train(&TrainArgs {
        config: tiny_cfg(),
        data: data.to_path_buf(),
        out: dir.to_path_buf(),
        epochs: Some(epochs),
        ..Default::default()
    })
    .unwrap()
    .checkpoint
}

#[test]
fn gen_synth_is_deterministic_and_loads_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let out = bin(&["gen-synth", "--out", s(d), "--n", "20", "--seed", "7"]);
        assert!(out.status.success());
    }
    assert_eq!(tree(&a), tree(&b));
    let m = load_manifest(&a).unwrap();
    assert_eq!(m.len(), 20);
    assert_eq!(m.count_only, 0);
    assert!(m.entries.iter().all(|e| (5..=50).contains(&e.count)));
}

#[test]
fn gen_synth_zero_images() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(&["gen-synth", "--out", s(tmp.path()), "--n", "0"]);
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(tmp.path().join("manifest")).unwrap(), "");
}

#[test]
fn train_resume_and_fingerprint_guard() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("synth");
    cmd_gen_synth(&data, 2, 5, 10, 3).unwrap();
    let run_dir = tmp.path().join("run");
    let ckpt = short_train(&run_dir, &data, 2);
    let before = fs::read(&ckpt).unwrap();
    let log = fs::read_to_string(run_dir.join(LOSS_LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["epoch"], 0);
    assert_eq!(first["steps"], 2);

    // Budget already met: nothing to do, checkpoint unchanged.
    let again = bin(&[
        "train", "--config", s(&tiny_cfg()), "--data", s(&data), "--out", s(&run_dir), "--ckpt", s(&ckpt), "--epochs", "2",
    ]);
    assert!(again.status.success(), "{}", String::from_utf8_lossy(&again.stderr));
    assert_eq!(fs::read(&ckpt).unwrap(), before);

    // A different seed changes the fingerprint.
    let refused = bin(&[
        "train", "--config", s(&tiny_cfg()), "--data", s(&data), "--out", s(&run_dir), "--ckpt", s(&ckpt), "--seed", "99",
    ]);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("fingerprint"));
    let refused = bin(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&tmp.path().join("r")), "--config", s(&tiny_cfg()), "--preset", "shb"]);
    assert!(!refused.status.success());
    assert!(!tmp.path().join("r").exists());
}

#[test]
fn split_training_matches_uninterrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("synth");
    cmd_gen_synth(&data, 2, 5, 10, 4).unwrap();
    let whole = short_train(&tmp.path().join("whole"), &data, 3);
    let part = short_train(&tmp.path().join("part"), &data, 1);
    let resumed = cmd_train(&TrainArgs {
        config: tiny_cfg(),
        data: data.clone(),
        out: tmp.path().join("part"),
        resume: Some(part),
        epochs: Some(3),
        ..Default::default()
    })
    .unwrap();
    assert_eq!(fs::read(whole).unwrap(), fs::read(resumed.checkpoint).unwrap());
    assert_eq!(
        fs::read(tmp.path().join("whole").join(LOSS_LOG_FILE)).unwrap(),
        fs::read(tmp.path().join("part").join(LOSS_LOG_FILE)).unwrap()
    );
}

#[test]
fn eval_reports_and_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("synth");
    cmd_gen_synth(&data, 2, 5, 10, 5).unwrap();
    let ckpt = short_train(&tmp.path().join("run"), &data, 1);

    let report = tmp.path().join("report.jsonl");
    let ok = bin(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&report)]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let lines: Vec<serde_json::Value> = fs::read_to_string(&report)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    let errs: Vec<f64> = lines[..2]
        .iter()
        .map(|l| (l["predicted"].as_f64().unwrap() - l["ground_truth"].as_f64().unwrap()).abs())
        .collect();
    assert!((lines[2]["mae"].as_f64().unwrap() - (errs[0] + errs[1]) / 2.0).abs() < 1e-12);

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() - 10);
    let corrupt = tmp.path().join("corrupt.ckpt");
    fs::write(&corrupt, bytes).unwrap();
    let out_path = tmp.path().join("partial.jsonl");
    let bad = bin(&["eval", "--ckpt", s(&corrupt), "--data", s(&data), "--out", s(&out_path)]);
    assert!(!bad.status.success());
    assert!(!out_path.exists());

    let empty = tmp.path().join("empty");
    cmd_gen_synth(&empty, 0, 5, 10, 5).unwrap();
    let bad = bin(&["eval", "--ckpt", s(&ckpt), "--data", s(&empty), "--out", s(&out_path)]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("no images"));
    assert!(!out_path.exists());
}

#[test]
fn cross_eval_cells_and_missing_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let mut ckpts = Vec::new();
    let mut data = Vec::new();
    for (name, lo, hi) in [("sparse", 1, 5), ("dense", 40, 60)] {
        let d = tmp.path().join(name);
        cmd_gen_synth(&d, 2, lo, hi, 8).unwrap();
        ckpts.push(short_train(&tmp.path().join(format!("run_{name}")), &d, 1));
        data.push(d);
    }
    let out = tmp.path().join("m.tsv");
    let cells = cmd_cross_eval(&ckpts, &data, &out, false).unwrap();
    assert_eq!(cells.len(), 2);
    assert!(cells.iter().all(|c| c.source != c.target && c.report.is_ok()));
    let tsv = fs::read_to_string(&out).unwrap();
    assert_eq!(tsv.lines().count(), 3);
    assert_eq!(fs::read_to_string(out.with_extension("jsonl")).unwrap().lines().count(), 2);

    let with_diag = cmd_cross_eval(&ckpts, &data, &out, true).unwrap();
    assert_eq!(with_diag.len(), 4);

    let single = cmd_cross_eval(&ckpts[..1], &data[1..], &out, false).unwrap();
    assert_eq!(single.len(), 1);

    let before = fs::read(&ckpts[0]).unwrap();
    let missing = tmp.path().join("nowhere");
    let cells = cmd_cross_eval(&ckpts[..1], &[missing, data[1].clone()], &out, false).unwrap();
    assert_eq!(cells.len(), 2);
    assert!(cells[0].report.is_err());
    assert!(cells[1].report.is_ok());
    assert!(fs::read_to_string(&out).unwrap().contains("nowhere"));
    assert_eq!(fs::read(&ckpts[0]).unwrap(), before);
}

#[test]
fn predict_zero_head_and_bad_image() {
    let tmp = tempfile::tempdir().unwrap();
    let run = RunConfig::tiny();
    let mut model = CrowdFormer::new(&run.model, 0).unwrap();
    for id in [model.head.regressor().0, model.head.regressor().1] {
        let shape = model.params.get(id).shape().to_vec();
        let name = model.params.name(id).to_string();
        model.params.assign(&name, Tensor::zeros(&shape)).unwrap();
    }
    let state = TrainState::new(&model.params, 0);
    let ckpt = tmp.path().join(CHECKPOINT_FILE);
    Checkpoint::new(run, "synth", model, state).unwrap().save(&ckpt).unwrap();
    let data = tmp.path().join("synth");
    cmd_gen_synth(&data, 1, 5, 10, 1).unwrap();

    let out = bin(&["predict", "--ckpt", s(&ckpt), "--image", s(&data.join("images/img_0000.png"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "0");

    let junk = tmp.path().join("junk.png");
    fs::write(&junk, b"not an image").unwrap();
    let out = bin(&["predict", "--ckpt", s(&ckpt), "--image", s(&junk)]);
    assert!(!out.status.success());
}

#[test]
fn gradcheck_is_deterministic() {
    let run = RunConfig::tiny();
    let a = cmd_gradcheck(&run, 3, 2, None).unwrap();
    let b = cmd_gradcheck(&run, 3, 2, None).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().any(|r| r.op_name == "model"));
    assert!(a.iter().all(|r| r.passed));
}

#[test]
fn rejects_unknown_preset_and_missing_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(&["train", "--config", s(&tmp.path().join("none.cfg")), "--data", ".", "--out", s(tmp.path())]);
    assert!(!out.status.success());
    let out = bin(&["train", "--config", s(&tiny_cfg()), "--data", ".", "--out", s(tmp.path()), "--preset", "abc"]);
    assert!(!out.status.success());
}
