use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to train in a second
hidden_dim = 16
heads = 2
ffn_dim = 32
num_queries = 6
rounds = 1
backbone_widths = 8,8,16,16
num_points = 64
batch_size = 1
steps = 6
";

fn m2f(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m2f")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = m2f(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    ok(&["gen-data", "--out", s(&data), "--seed", "3", "--train", "6", "--val", "3", "--size", "32", "--max-instances", "3"]);
    let (train_set, val_set) = (data.join("train.m2fd"), data.join("val.m2fd"));
    assert!(train_set.exists() && val_set.exists());

    let config = root.join("tiny.cfg");
    std::fs::write(&config, TINY).unwrap();
    let run = root.join("run");
    let stdout = ok(&[
        "train", "--data", s(&train_set), "--config", s(&config), "--seed", "4", "--out", s(&run),
        "--ablation", "attention=cross", "--ablation", "layer_order=SA-MA-FFN", "--echo-every", "0",
    ]);
    let ckpt = run.join("step_6.ckpt");
    assert_eq!(stdout.trim(), ckpt.to_str().unwrap());
    let saved = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(saved.contains("attention = cross") && saved.contains("seed = 4") && saved.contains("layer_order = SA-MA-FFN"));
    assert_eq!(std::fs::read_to_string(run.join("train.log")).unwrap().lines().count(), 6);

    let eval_dir = root.join("eval");
    let table = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&val_set), "--task", "panoptic", "--out", s(&eval_dir)]);
    assert!(table.contains("PQ"), "{table}");
    let kv = std::fs::read_to_string(eval_dir.join("eval_panoptic.txt")).unwrap();
    for key in ["pq =", "ap =", "miou ="] {
        assert!(kv.contains(key), "{kv}");
    }
    for task in ["instance", "semantic"] {
        ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&val_set), "--task", task]);
    }

    let layers = ok(&["analyze", "per-layer-pq", "--checkpoint", s(&ckpt), "--data", s(&val_set)]);
    assert_eq!(layers.lines().count(), 1 + 4);
    let ar = ok(&["analyze", "proposal-ar", "--checkpoint", s(&ckpt), "--data", s(&val_set)]);
    assert!(ar.contains("final_ge_initial ="));
    let fg = ok(&["analyze", "fg-attention", "--checkpoint", s(&ckpt), "--data", s(&val_set), "--out", s(&eval_dir)]);
    assert!(fg.starts_with("scale"));
    assert!(eval_dir.join("fg-attention.txt").exists());

    let renders = root.join("renders");
    ok(&["render", "--checkpoint", s(&ckpt), "--data", s(&val_set), "--out", s(&renders), "--count", "2"]);
    for name in ["scene_0_panoptic.ppm", "scene_0_gt.ppm", "scene_1_panoptic.ppm"] {
        let bytes = std::fs::read(renders.join(name)).unwrap();
        assert!(bytes.starts_with(b"P6\n32 32\n255\n"), "{name}");
    }
}

#[test]
fn training_twice_gives_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    ok(&["gen-data", "--out", s(&data), "--train", "4", "--val", "1", "--size", "32", "--max-instances", "2"]);
    let config = root.join("tiny.cfg");
    std::fs::write(&config, TINY).unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = root.join(name);
        ok(&["train", "--data", s(&data.join("train.m2fd")), "--config", s(&config), "--out", s(&out), "--echo-every", "0"]);
        let ckpt = out.join("step_6.ckpt");
        let img = root.join(format!("{name}_img"));
        ok(&["render", "--checkpoint", s(&ckpt), "--data", s(&data.join("val.m2fd")), "--out", s(&img)]);
        runs.push([
            std::fs::read(&ckpt).unwrap(),
            std::fs::read(out.join("train.log")).unwrap(),
            std::fs::read(img.join("scene_0_panoptic.ppm")).unwrap(),
        ]);
    }
    assert!(runs[0] == runs[1]);
}

#[test]
fn exit_codes() {
    assert_eq!(m2f(&["--help"]).status.code(), Some(0));
    assert_eq!(m2f(&[]).status.code(), Some(1));
    assert_eq!(m2f(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(m2f(&["eval", "--checkpoint", "x", "--data", "y", "--task", "bogus"]).status.code(), Some(1));

    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.m2fd");
    let out = tmp.path().join("out");
    let code = |args: &[&str]| m2f(args).status.code();
    assert_eq!(code(&["train", "--data", s(&missing), "--out", s(&out)]), Some(2));
    assert_eq!(code(&["train", "--data", s(&missing), "--out", s(&out), "--ablation", "attention=sideways"]), Some(1));
    assert_eq!(code(&["train", "--data", s(&missing), "--out", s(&out), "--ablation", "nokey"]), Some(1));
    assert_eq!(code(&["gen-data", "--out", s(&out), "--size", "4"]), Some(1));

    let bad_cfg = tmp.path().join("bad.cfg");
    std::fs::write(&bad_cfg, "heads = 3\n").unwrap();
    assert_eq!(code(&["train", "--data", s(&missing), "--out", s(&out), "--config", s(&bad_cfg)]), Some(1));
}
