use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5
[corpus]
dialogues = 60
[encoder]
num_layers = 2
hidden_dim = 16
num_heads = 2
ffn_dim = 32
max_len = 64
[train]
max_steps = 8
eval_every = 4
batch_size = 6
dev_batches = 1
[eval]
steps = 5
pool_size = 10
"#;

fn boottod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boottod")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = boottod(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let (corpus, pt) = (root.join("corpus"), root.join("pt"));

    let text = ok(&["gen-corpus", "--config", p(&cfg), "--out", p(&corpus)]);
    assert!(text.contains("48 train / 6 dev / 6 test"), "{text}");
    for f in ["train.jsonl", "dev.labels.jsonl", "meta.json", "manifest.json", "config.resolved.toml"] {
        assert!(corpus.join(f).exists(), "{f}");
    }

    ok(&["pretrain", "--config", p(&cfg), "--corpus", p(&corpus), "--out", p(&pt), "--k", "1", "--p-mode", "3"]);
    let log = std::fs::read_to_string(pt.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 8 + 3);
    let resolved = std::fs::read_to_string(pt.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("k = 1") && resolved.contains("p_mode = \"3\""), "{resolved}");

    let inspect = ok(&["inspect-checkpoint", p(&pt.join("checkpoint"))]);
    assert!(inspect.contains("checksum"), "{inspect}");

    let rs = root.join("rs");
    let ck = pt.join("checkpoint");
    ok(&["eval", "--config", p(&cfg), "--task", "response-selection", "--corpus", p(&corpus), "--checkpoint", p(&ck), "--out", p(&rs)]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(rs.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["task"], "response-selection");
    assert!(report["metrics"]["1-to-10"].as_f64().unwrap() <= 1.0);
    assert!(rs.join("report.csv").exists());

    let intent = root.join("intent");
    ok(&["finetune", "--config", p(&cfg), "--task", "intent", "--corpus", p(&corpus), "--random-init", "--out", p(&intent)]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(intent.join("report.json")).unwrap()).unwrap();
    assert!(report["metrics"]["acc_all"].is_number(), "{report}");
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    assert_eq!(boottod(&["pretrain", "--bogus"]).status.code(), Some(1));
    assert_eq!(boottod(&["pretrain", "--out", p(root)]).status.code(), Some(1));

    let bad = root.join("bad.toml");
    std::fs::write(&bad, "[train]\nwarp = 9\n").unwrap();
    let out = boottod(&["pretrain", "--config", p(&bad), "--out", p(root)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp"));

    let missing = root.join("nowhere");
    let out = boottod(&["pretrain", "--corpus", p(&missing), "--out", p(&root.join("o"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = boottod(&["inspect-checkpoint", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));
}
