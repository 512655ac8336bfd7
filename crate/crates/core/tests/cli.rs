use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        Workspace { _tmp: tmp, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// A small config; `patch` is merged into it key by key.
    fn config(&self, name: &str, patch: Value) -> PathBuf {
        let mut cfg = json!({
            "seed": 3,
            "out": self.path("runs"),
            "data": {
                "dir": self.path("data"),
                "num_classes": 6,
                "train_images": 40,
                "test_images": 8,
                "canvas": [64, 64],
                "novel": {"ids": [1, 4]},
                "ks": [1, 2]
            },
            "train": {
                "phase1_iters": 8,
                "phase2_iters": 4,
                "k": 2,
                "phase1_shots": 1,
                "checkpoint_every": 4,
                "ft_full_window": 2,
                "ft_full_max_iters": 8,
                "detector": {"channels": 16, "mid_channels": 12, "stem_channels": 8, "head_hidden": 16, "meta_input_size": 32}
            },
            "eval": {"timing_images": 2, "timing_repeats": 1}
        });
        merge(&mut cfg, patch);
        let path = self.path(name);
        std::fs::write(&path, cfg.to_string()).unwrap();
        path
    }

    fn run(&self, config: &Path, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_metarcnn"))
            .arg("--config")
            .arg(config)
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn ok(o: &Output) {
    assert_eq!(code(o), 0, "stdout:\n{}\nstderr:\n{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
}

fn read(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_train_eval_report_round_trip() {
    let ws = Workspace::new();
    let cfg = ws.config("run.json", json!({}));

    ok(&ws.run(&cfg, &["gen"]));
    let summary = read(&ws.path("data/gen_summary.json"));
    assert_eq!(summary["novel_classes"], json!([1, 4]));
    assert_eq!(summary["provenance"]["config"]["seed"], json!(3));
    assert!(summary["provenance"]["code_version"].as_str().unwrap().contains('+'));
    let manifest = std::fs::read(ws.path("data/train/manifest.jsonl")).unwrap();
    ok(&ws.run(&cfg, &["gen"]));
    assert_eq!(std::fs::read(ws.path("data/train/manifest.jsonl")).unwrap(), manifest);

    ok(&ws.run(&cfg, &["train", "--strategy", "meta_rcnn"]));
    let run = ws.path("runs/meta_rcnn_k2_s3");
    let first = read(&run.join("run.json"));
    assert_eq!(first["iterations"], json!(12));
    assert!(run.join("checkpoints/iter_000004.ckpt").exists());
    ok(&ws.run(&cfg, &["train", "--strategy", "meta_rcnn"]));
    assert_eq!(read(&run.join("run.json"))["checkpoint_sha256"], first["checkpoint_sha256"]);

    let ck = run.join("final.ckpt");
    let ck = ck.to_str().unwrap();
    ok(&ws.run(&cfg, &["eval", "--checkpoint", ck, "--timing", "--curve"]));
    let report = read(&run.join("report_k2_all.json"));
    assert_eq!(report["settings"]["checkpoint_sha256"], first["checkpoint_sha256"]);
    assert!(report["provenance"]["config"].is_object());
    let bank = read(&run.join("bank_k2.json"));
    assert_eq!(bank["entries"].as_object().unwrap().len(), 6);
    assert!(read(&run.join("timing_k2.json"))["overhead_ratio"].as_f64().unwrap() > 0.0);
    assert_eq!(read(&run.join("curve_k2_all.json"))["iterations"], json!([4, 8, 12]));
    let dets = std::fs::read_to_string(run.join("detections_k2_all.jsonl")).unwrap();
    assert!(dets.lines().next().unwrap().contains("provenance"));

    let report_bytes = std::fs::read(run.join("report_k2_all.json")).unwrap();
    ok(&ws.run(&cfg, &["eval", "--checkpoint", ck, "--timing"]));
    assert_eq!(std::fs::read(run.join("report_k2_all.json")).unwrap(), report_bytes);

    ok(&ws.run(&cfg, &["eval", "--checkpoint", ck, "--classes", "novel", "--k", "1"]));
    assert_eq!(read(&run.join("report_k1_novel.json"))["classes"], json!([1, 4]));

    ok(&ws.run(&cfg, &["train", "--strategy", "frcn_ft"]));
    let frcn = ws.path("runs/frcn_ft_k2_s3/final.ckpt");
    ok(&ws.run(&cfg, &["eval", "--checkpoint", frcn.to_str().unwrap()]));
    // a plain detector has no bank to time
    assert_eq!(code(&ws.run(&cfg, &["eval", "--checkpoint", frcn.to_str().unwrap(), "--timing"])), 2);

    ok(&ws.run(&cfg, &["report"]));
    let summary = read(&ws.path("runs/summary.json"));
    assert_eq!(summary["reports"].as_array().unwrap().len(), 3);

    // resuming from a periodic checkpoint reproduces the final one
    ok(&ws.run(&cfg, &["train", "--resume", &format!("{}/checkpoints/iter_000008.ckpt", run.display())]));
    assert_eq!(read(&run.join("run.json"))["checkpoint_sha256"], first["checkpoint_sha256"]);

    // registry K disagrees with --k
    let reg = ws.path("data/registry_k2.json");
    let o = ws.run(&cfg, &["eval", "--checkpoint", ck, "--registry", reg.to_str().unwrap(), "--k", "1"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    // K without a registry
    assert_eq!(code(&ws.run(&cfg, &["train", "--k", "5"])), 2);
}

#[test]
fn ablation_runs_and_rejects_unknown_axes() {
    let ws = Workspace::new();
    let cfg = ws.config("run.json", json!({}));
    ok(&ws.run(&cfg, &["gen"]));
    let bad = ws.path("bad.json");
    std::fs::write(&bad, r#"{"axes": {"dropout": [0.1]}}"#).unwrap();
    assert_eq!(code(&ws.run(&cfg, &["ablate", "--matrix", bad.to_str().unwrap()])), 2);

    let m = ws.path("matrix.json");
    std::fs::write(&m, r#"{"axes": {"fusion": ["channelwise", "plus"], "meta-loss": [true, false]}}"#).unwrap();
    ok(&ws.run(&cfg, &["ablate", "--matrix", m.to_str().unwrap()]));
    let table = read(&ws.path("runs/ablation/table.json"));
    assert_eq!(table["axes"], json!(["meta_loss", "fusion"]));
    assert_eq!(table["rows"].as_array().unwrap().len(), 4);
    assert!(std::fs::read_to_string(ws.path("runs/ablation/table.txt")).unwrap().contains("plus"));
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let ws = Workspace::new();
    for (name, patch) in [
        ("unknown.json", json!({"trian": {}})),
        ("nested.json", json!({"train": {"detector": {"chanels": 8}}})),
        ("zero.json", json!({"data": {"num_classes": 0}})),
        ("shots.json", json!({"train": {"k": 0}})),
        ("novel.json", json!({"data": {"novel": {"ids": [9]}}})),
    ] {
        let cfg = ws.config(name, patch);
        let o = ws.run(&cfg, &["gen"]);
        assert_eq!(code(&o), 2, "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let cfg = ws.config("run.json", json!({}));
    assert_eq!(code(&ws.run(&cfg, &["train", "--strategy", "yolo"])), 2);
    std::fs::write(ws.path("broken.json"), "{").unwrap();
    assert_eq!(code(&ws.run(&ws.path("broken.json"), &["gen"])), 2);
}

#[test]
fn missing_data_exits_with_code_three() {
    let ws = Workspace::new();
    let cfg = ws.config("run.json", json!({}));
    let o = ws.run(&cfg, &["train"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&ws.run(&cfg, &["report"])), 3);
}

#[test]
fn published_schemas_match_the_code() {
    let docs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs");
    for (file, args) in [("run_config.schema.json", &["schema"][..]), ("ablation_matrix.schema.json", &["schema", "--ablation"][..])] {
        let out = Command::new(env!("CARGO_BIN_EXE_metarcnn")).args(args).output().unwrap();
        ok(&out);
        let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(read(&docs.join(file)), printed, "{file} is stale; regenerate it with `metarcnn {}`", args.join(" "));
    }
    let schema = read(&docs.join("run_config.schema.json"));
    assert_eq!(schema["additionalProperties"], json!(false));
    assert_eq!(schema["$defs"]["DetectorConfig"]["additionalProperties"], json!(false));
}
