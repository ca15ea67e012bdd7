use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_prefixmix"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

const TINY: &str = "\
train_sequences=192
test_sequences=48
S=32
E=2
M=8
router_layers=1
router_hidden=8
router_rounds=2
router_chunk=64
router_steps=3
router_batch=8
router_warmup=1
expert_layers=1
expert_hidden=16
expert_heads=2
expert_steps=5
expert_batch=8
expert_warmup=1
eval_prefixes=4,8
tfidf_components=4
log_every=0
";

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.cfg");
    std::fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r").display().to_string();
    assert_eq!(run(&["synth", "--out", &out, "--set", "no_such_key=1"]).status.code(), Some(2));
    assert_eq!(run(&["synth"]).status.code(), Some(2));
    assert_eq!(run(&["synth", "--out", &out, "--set", "M=1"]).status.code(), Some(2));
    let bad = tmp.path().join("bad.cfg");
    std::fs::write(&bad, "E=2\nE=3\n").unwrap();
    assert_eq!(run(&["synth", "--out", &out, "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(run(&["flops", "--preset", "nope"]).status.code(), Some(2));
}

#[test]
fn cost_commands() {
    let t = run(&["table7", "--check"]);
    assert_eq!(t.status.code(), Some(0));
    let text = String::from_utf8(t.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 7);

    let f = run(&["flops", "--preset", "335m-dense"]);
    assert!(f.status.success());
    let v: serde_json::Value = serde_json::from_slice(&f.stdout).unwrap();
    let train = v["train"]["total"].as_f64().unwrap();
    assert!((train / 1e19 - 31.02).abs() / 31.02 < 0.005);

    let c = run(&["comm"]);
    let v: serde_json::Value = serde_json::from_slice(&c.stdout).unwrap();
    assert_eq!(v["router"]["bytes_per_router_per_event"], 5_625_000);
    assert_eq!(v["router"]["events"], 94);
    assert_eq!(v["ddp_bytes_per_step"], 10_400_000_000u64);
    assert_eq!(v["expert_steps_between_exchanges"], 262_144);
}

#[test]
fn flags_beat_file_beat_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("r");
    let o = run(&["synth", "--config", &cfg, "--out", out.to_str().unwrap(), "--set", "test_sequences=40"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["test_sequences"], 40);
    assert_eq!(m["config"]["train_sequences"], 192);
    assert_eq!(m["config"]["domains"], 4);
    assert_eq!(m["seeds"]["corpus_seed"], 1);
}

#[test]
fn diverging_training_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("r");
    let o = run(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--set", "router_lr=1e30"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn phases_then_reproduce() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let a = tmp.path().join("a");
    let a_s = a.to_str().unwrap();
    for args in [
        vec!["synth"],
        vec!["train-routers"],
        vec!["shard"],
        vec!["train-expert", "--index", "1"],
        vec!["train-expert", "--index", "0"],
        vec!["train-dense"],
        vec!["eval"],
        vec!["sweep", "--prefixes", "2,4,8"],
    ] {
        let mut full = args.clone();
        full.extend(["--config", &cfg, "--out", a_s]);
        let o = run(&full);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(run(&["train-expert", "--index", "2", "--config", &cfg, "--out", a_s]).status.code(), Some(2));
    let sweep = std::fs::read_to_string(a.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 4);

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    for artifact in manifest["artifacts"].as_array().unwrap() {
        assert!(a.join(artifact.as_str().unwrap()).exists());
    }

    let b = tmp.path().join("b");
    let o = run(&["reproduce", "--manifest", a.join("manifest.json").to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "eval.csv", "ledger.json", "sweep.csv", "experts/expert_0.pmck", "dense/dense.pmck"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn pack_and_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in.txt");
    std::fs::write(&input, vec![b'a'; 100]).unwrap();
    let out = tmp.path().join("x.pmix");
    let o = run(&["pack", "--input", input.to_str().unwrap(), "--output", out.to_str().unwrap(), "--seq-len", "16"]);
    assert!(o.status.success());
    assert_eq!(prefixmix::corpus::read_packed(&out).unwrap().len(), 6);

    let cfg = write_config(tmp.path());
    let r = tmp.path().join("r");
    assert!(run(&["run", "--config", &cfg, "--out", r.to_str().unwrap(), "--workers", "2"]).status.success());
    let o = run(&["compare-routers", "--config", &cfg, "--out", r.to_str().unwrap(), "--variants", "lm:1x8x2,tfidf:4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert_eq!(run(&["compare-routers", "--config", &cfg, "--out", r.to_str().unwrap(), "--variants", "knn:3"]).status.code(), Some(2));
}

#[test]
fn every_config_key_is_documented() {
    let doc = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/config.md")).unwrap();
    let cfg = prefixmix::config::ExperimentConfig { out_dir: Some("x".into()), ..Default::default() };
    for line in cfg.to_key_values().lines() {
        let key = line.split('=').next().unwrap();
        assert!(doc.contains(&format!("`{key}`")), "{key} missing from docs/config.md");
    }
}
