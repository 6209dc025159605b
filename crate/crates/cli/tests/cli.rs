use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_disentangle"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const TINY: [&str; 6] = ["--set", "model=tiny", "--set", "batch_size=4", "--set", "epochs=1"];

#[test]
fn synth_data_writes_requested_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(&["synth-data", "--out", s(&out), "--set", "model=tiny", "--set", "clips_per_class=16"]);
    let (ds, _) = disentangle::data::read_archive(&out.join("data.dsa")).unwrap();
    assert_eq!(disentangle::data::Dataset::len(&ds), 128);
    assert!(out.join("config.toml").exists());
    assert!(!out.join(".lock").exists(), "lock released");
}

#[test]
fn pretrain_eval_reconstruct_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth-data", "--out", s(&data), "--set", "model=tiny", "--set", "clips_per_class=2"]);
    let archive = data.join("data.dsa");
    let data_key = format!("data={}", s(&archive));
    let run = dir.path().join("run");
    let mut args = vec!["pretrain", "--out", s(&run), "--set", &data_key, "--set", "val_fraction=0.25"];
    args.extend(TINY);
    ok(&args);
    for f in ["config.toml", "metrics.jsonl", "best.ckpt", "final.ckpt", "summary.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ckpt_key = format!("checkpoint={}", s(&run.join("best.ckpt")));
    let ev = dir.path().join("eval");
    ok(&["eval", "--out", s(&ev), "--set", "model=tiny", "--set", &data_key, "--set", &ckpt_key]);
    let report = json(&ev.join("eval.json"));
    assert!(report["losses"]["total"].as_f64().unwrap().is_finite());
    assert_eq!(report["n_items"], 16);
    let rec = dir.path().join("rec");
    ok(&["reconstruct", "--out", s(&rec), "--set", "model=tiny", "--set", &data_key, "--set", &ckpt_key]);
    let img = image_dims(&rec.join("reconstruction.png"));
    assert_eq!(img, (3 * 16 + 4, 2 * 16 + 2));
}

fn image_dims(p: &Path) -> (u32, u32) {
    // PNG IHDR: width and height are the big-endian u32s at offsets 16 and 20.
    let b = std::fs::read(p).unwrap();
    let be = |o: usize| u32::from_be_bytes(b[o..o + 4].try_into().unwrap());
    (be(16), be(20))
}

#[test]
fn finetune_inits_differ_only_in_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth-data", "--out", s(&data), "--set", "model=tiny", "--set", "clips_per_class=2"]);
    let data_key = format!("data={}", s(&data.join("data.dsa")));
    let pre = dir.path().join("pre");
    let mut args = vec!["pretrain", "--out", s(&pre), "--set", &data_key, "--set", "val_fraction=0.25"];
    args.extend(TINY);
    ok(&args);
    let ckpt_key = format!("checkpoint={}", s(&pre.join("best.ckpt")));
    let mut runs = Vec::new();
    for init in ["random", "disentangle"] {
        let out = dir.path().join(init);
        let mut args = vec!["finetune", "--init", init, "--out", s(&out), "--set", &data_key];
        args.extend(["--set", "val_fraction=0.25", "--set", &ckpt_key]);
        args.extend(TINY);
        ok(&args);
        runs.push((json(&out.join("init.json")), std::fs::read_to_string(out.join("config.toml")).unwrap()));
    }
    let (random, disent) = (&runs[0], &runs[1]);
    assert_ne!(random.0["encoder_sha256"], disent.0["encoder_sha256"]);
    assert_eq!(random.0["head_sha256"], disent.0["head_sha256"]);
    let differing: Vec<_> = random.1.lines().zip(disent.1.lines()).filter(|(a, b)| a != b).collect();
    assert_eq!(differing.len(), 1, "{differing:?}");
    assert!(differing[0].0.starts_with("init"));
}

#[test]
fn validation_errors_exit_1_runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("x");
    let out = cli(&["pretrain", "--out", s(&o), "--set", "foo=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("foo"));
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(1));
    let out = cli(&["pretrain", "--out", s(&o), "--set", "data=/nonexistent/data.dsa"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data"));
}

#[test]
fn busy_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(".lock"), "").unwrap();
    let out = cli(&["synth-data", "--out", s(dir.path()), "--set", "model=tiny", "--set", "clips_per_class=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("data.dsa").exists());
}
