use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn tiny_config() -> Value {
    json!({
        "model": {
            "activation": "relu",
            "d_ffn": 32,
            "d_model": 16,
            "dec_layers": 2,
            "embedding_mode": "random_pruned",
            "enc_layers": 2,
            "init": {"family": "kaiming_uniform", "sigma_scaling": true},
            "max_len": 6,
            "n_heads": 2,
            "sigma": 0.5,
            "src_vocab": 12,
            "tgt_vocab": 12,
            "tie_decoder_io": false,
            "tie_mode": "one_layer"
        },
        "seed": 5,
        "task": {
            "kind": "copy",
            "max_len": 4,
            "min_len": 1,
            "seed": 3,
            "test_samples": 40,
            "train_samples": 200,
            "valid_samples": 40,
            "vocab_size": 12
        },
        "train": {
            "batch_size": 8,
            "beta1": 0.9,
            "beta2": 0.98,
            "eps": 1e-9,
            "eval_batch_size": 16,
            "eval_every": 3,
            "eval_samples": 20,
            "lr": 0.01,
            "steps": 6,
            "target_seq_acc": null,
            "warmup_steps": 2
        }
    })
}

struct Workspace {
    dir: TempDir,
    config: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        Self::with_config(tiny_config())
    }

    fn with_config(config: Value) -> Self {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
        Workspace { dir, config: path }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, tag: &str, extra: &[&str]) -> Output {
        let metrics = self.path(&format!("{tag}.jsonl"));
        let out = self.path(&format!("{tag}.oltc"));
        let mut args = vec![
            "train".to_string(),
            "--config".into(),
            s(&self.config),
            "--metrics-out".into(),
            s(&metrics),
            "--out".into(),
            s(&out),
        ];
        args.extend(extra.iter().map(|a| a.to_string()));
        run(&args)
    }
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn run<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_onelayer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn ok(o: &Output) {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn records(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn train_is_deterministic() {
    let ws = Workspace::new();
    let a = ws.train("a", &[]);
    let b = ws.train("b", &[]);
    ok(&a);
    ok(&b);
    let (ma, mb) = (fs::read(ws.path("a.jsonl")).unwrap(), fs::read(ws.path("b.jsonl")).unwrap());
    assert!(!ma.is_empty());
    assert_eq!(ma, mb);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(fs::read(ws.path("a.oltc")).unwrap(), fs::read(ws.path("b.oltc")).unwrap());
}

#[test]
fn metrics_stream_has_required_fields_and_constant_weights() {
    let ws = Workspace::new();
    ok(&ws.train("m", &[]));
    let recs = records(&ws.path("m.jsonl"));
    let steps: Vec<u64> = recs.iter().map(|r| r["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, vec![0, 3, 6]);
    for r in &recs {
        for key in ["train_loss", "val_loss", "token_acc", "seq_acc", "bleu"] {
            assert!(r.get(key).is_some(), "missing {key}");
        }
    }
    assert!(recs[0]["train_loss"].is_null());
    assert_eq!(recs.first().unwrap()["weight_checksum"], recs.last().unwrap()["weight_checksum"]);
}

#[test]
fn different_seed_changes_stream() {
    let ws = Workspace::new();
    ok(&ws.train("a", &[]));
    ok(&ws.train("b", &["--seed", "6"]));
    assert_ne!(fs::read(ws.path("a.jsonl")).unwrap(), fs::read(ws.path("b.jsonl")).unwrap());
}

#[test]
fn single_sigma_sweep_matches_train() {
    let ws = Workspace::new();
    ok(&ws.train("t", &["--sigma", "0.3"]));
    let sweep_metrics = ws.path("sweep.jsonl");
    let out = run(&[
        "sweep",
        "--config",
        &s(&ws.config),
        "--sigmas",
        "0.3",
        "--metrics-out",
        &s(&sweep_metrics),
    ]);
    ok(&out);
    assert_eq!(fs::read(ws.path("t.jsonl")).unwrap(), fs::read(&sweep_metrics).unwrap());
}

#[test]
fn sweep_reports_each_sigma_in_order() {
    let ws = Workspace::new();
    let out = run(&["sweep", "--config", &s(&ws.config), "--sigmas", "0.9,0.2", "--json"]);
    ok(&out);
    let rows: Value = serde_json::from_slice(&out.stdout).unwrap();
    let sigmas: Vec<f64> = rows.as_array().unwrap().iter().map(|r| r["sigma"].as_f64().unwrap()).collect();
    assert_eq!(sigmas.len(), 2);
    assert!((sigmas[0] - 0.9).abs() < 1e-6 && (sigmas[1] - 0.2).abs() < 1e-6);
}

#[test]
fn bad_sweeps_exit_2() {
    let ws = Workspace::new();
    for sigmas in ["0.5,0.5", "0", "1.5"] {
        let out = run(&["sweep", "--config", &s(&ws.config), "--sigmas", sigmas]);
        assert_eq!(code(&out), 2, "{sigmas}");
    }
}

#[test]
fn invalid_config_exits_2_before_training() {
    let mut cfg = tiny_config();
    cfg["model"]["n_heads"] = json!(3);
    let ws = Workspace::with_config(cfg);
    let out = ws.train("x", &[]);
    assert_eq!(code(&out), 2);
    assert!(!ws.path("x.jsonl").exists());

    let ws = Workspace::new();
    assert_eq!(code(&ws.train("y", &["--sigma", "0"])), 2);
    let mut cfg = tiny_config();
    cfg["model"]["surprise"] = json!(1);
    let ws = Workspace::with_config(cfg);
    assert_eq!(code(&ws.train("z", &[])), 2);
}

#[test]
fn eval_reproduces_final_test_metrics() {
    let ws = Workspace::new();
    ok(&ws.train("e", &[]));
    let ckpt = s(&ws.path("e.oltc"));
    let a = run(&["eval", &ckpt, "--config", &s(&ws.config)]);
    let b = run(&["eval", &ckpt, "--config", &s(&ws.config)]);
    ok(&a);
    assert_eq!(a.stdout, b.stdout);
    let v: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["split"], "test");
    assert_eq!(v["examples"], 40);
    let valid = run(&["eval", &ckpt, "--config", &s(&ws.config), "--split", "valid"]);
    ok(&valid);
}

#[test]
fn inspect_reports_healthy_checkpoint() {
    let ws = Workspace::new();
    ok(&ws.train("i", &[]));
    let out = run(&["inspect", &s(&ws.path("i.oltc")), "--json"]);
    ok(&out);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["crc_ok"], true);
    assert_eq!(v["score_sections"], 0);
    for m in v["masks"].as_array().unwrap() {
        assert_eq!(m["ones"], m["k_count"]);
    }
    let text = run(&["inspect", &s(&ws.path("i.oltc"))]);
    ok(&text);
    assert!(String::from_utf8_lossy(&text.stdout).contains("crc             ok"));
}

#[test]
fn tampered_checkpoint_exits_3() {
    let ws = Workspace::new();
    ok(&ws.train("c", &[]));
    let path = ws.path("c.oltc");
    let mut bytes = fs::read(&path).unwrap();
    let at = bytes.len() - 20;
    bytes[at] ^= 0x40;
    let bad = ws.path("bad.oltc");
    fs::write(&bad, &bytes).unwrap();

    let out = run(&["inspect", &s(&bad)]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    assert_eq!(code(&run(&["eval", &s(&bad), "--config", &s(&ws.config)])), 3);

    fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(code(&run(&["inspect", &s(&bad)])), 3);
    fs::write(&bad, b"not a checkpoint").unwrap();
    assert_eq!(code(&run(&["eval", &s(&bad)])), 3);
}

#[test]
fn resume_continues_the_same_stream() {
    let ws = Workspace::new();
    let mut long = tiny_config();
    long["train"]["steps"] = json!(9);
    let full = Workspace::with_config(long);
    ok(&full.train("full", &[]));

    ok(&ws.train("first", &["--resume-out", &s(&ws.path("first.resume"))]));
    let out = run(&[
        "train",
        "--resume",
        &s(&ws.path("first.resume")),
        "--steps",
        "9",
        "--metrics-out",
        &s(&ws.path("second.jsonl")),
        "--out",
        &s(&ws.path("second.oltc")),
    ]);
    ok(&out);
    let mut joined = fs::read(ws.path("first.jsonl")).unwrap();
    joined.extend(fs::read(ws.path("second.jsonl")).unwrap());
    assert_eq!(joined, fs::read(full.path("full.jsonl")).unwrap());
    assert_eq!(
        fs::read(ws.path("second.oltc")).unwrap(),
        fs::read(full.path("full.oltc")).unwrap()
    );

    let clash = run(&["train", "--resume", &s(&ws.path("first.resume")), "--sigma", "0.2"]);
    assert_eq!(code(&clash), 2);
    let not_resumable = run(&["train", "--resume", &s(&ws.path("first.oltc")), "--out", &s(&ws.path("n.oltc"))]);
    assert_eq!(code(&not_resumable), 2);
}

#[test]
fn footprint_compares_tie_modes() {
    let ws = Workspace::new();
    let out = run(&["footprint", "--config", &s(&ws.config), "--compare", "per_layer", "--json"]);
    ok(&out);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let reports = v.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0]["tie_mode"], "one_layer");
    assert_eq!(reports[1]["tie_mode"], "per_layer");
    assert_eq!(reports[0]["mask_count"], reports[1]["mask_count"]);
    assert!(reports[0]["stored_floats"].as_u64() < reports[1]["stored_floats"].as_u64());

    let text = run(&["footprint", "--compare", "per_layer"]);
    ok(&text);
    assert!(String::from_utf8_lossy(&text.stdout).contains("retained floats"));
}

#[test]
fn embedding_file_must_exist() {
    let ws = Workspace::new();
    let out = ws.train("emb", &["--embedding", "file:/definitely/missing.olem"]);
    assert_eq!(code(&out), 2);
    let out = ws.train("emb", &["--embedding", "bogus"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn init_overrides_change_weights() {
    let ws = Workspace::new();
    ok(&ws.train("k", &[]));
    ok(&ws.train("x", &["--init", "xavier", "--sigma-scaling", "off"]));
    let first = |tag: &str| records(&ws.path(&format!("{tag}.jsonl")))[0]["weight_checksum"].clone();
    assert_ne!(first("k"), first("x"));
}
