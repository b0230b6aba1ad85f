use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kblm::kb::{Candidate, CandidateDictionary, KbPaths, KnowledgeBase};
use kblm::vocab::Vocabulary;
use kblm::Tensor;
use serde_json::Value;

fn kblm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kblm")).args(args).current_dir(cwd).output().expect("run kblm")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let o = kblm(args, cwd);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

const SMALL: [&str; 4] = ["--set", "facts=60", "--set", "held_out=10"];

fn synth_small(dir: &Path, out: &str) {
    let mut args = vec!["synth", "--out", out];
    args.extend_from_slice(&SMALL);
    ok(&args, dir);
}

#[test]
fn synth_is_byte_identical_for_a_seed_and_creates_directories() {
    let d = tempfile::tempdir().unwrap();
    synth_small(d.path(), "a/nested");
    synth_small(d.path(), "b");
    for f in ["vocab.txt", "corpus.jsonl", "probes.jsonl", "manifest.json", "kb/entities.jsonl", "run.toml"] {
        let a = fs::read(d.path().join("a/nested").join(f)).unwrap();
        let b = fs::read(d.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let manifest: Value = serde_json::from_slice(&fs::read(d.path().join("b/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 13);
    assert!(manifest["sizes"]["facts"].as_u64().is_some());
    let mut args = vec!["synth", "--out", "c", "--seed", "14"];
    args.extend_from_slice(&SMALL);
    ok(&args, d.path());
    assert_ne!(fs::read(d.path().join("b/corpus.jsonl")).unwrap(), fs::read(d.path().join("c/corpus.jsonl")).unwrap());
}

#[test]
fn exit_codes_follow_the_contract() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(kblm(&["--help"], d.path()).status.code(), Some(0));
    assert_eq!(kblm(&["--version"], d.path()).status.code(), Some(0));
    assert_eq!(kblm(&["frobnicate"], d.path()).status.code(), Some(1));
    assert_eq!(kblm(&["train", "--config", "missing.toml", "--stage", "full"], d.path()).status.code(), Some(1));
    synth_small(d.path(), "data");
    let bad_key = kblm(&["train", "--config", "data/run.toml", "--stage", "full", "--set", "no_such_key=1"], d.path());
    assert_eq!(bad_key.status.code(), Some(1));
    let bad_size = kblm(&["synth", "--out", "x", "--set", "facts=5", "--set", "held_out=9"], d.path());
    assert_eq!(bad_size.status.code(), Some(1));
    // no linker stage yet although supervision exists
    let order = kblm(&["train", "--config", "data/run.toml", "--stage", "full"], d.path());
    assert_eq!(order.status.code(), Some(1), "{}", String::from_utf8_lossy(&order.stderr));
    // no checkpoint to evaluate
    assert_eq!(kblm(&["eval", "--config", "data/run.toml", "--probe", "mrr"], d.path()).status.code(), Some(1));
}

const FAST: [&str; 12] = [
    "--set", "encoder.layers=2",
    "--set", "encoder.dim=16",
    "--set", "encoder.ffn=32",
    "--set", "kb.0.kar.layer=1",
    "--set", "linker.schedule.total_steps=20",
    "--set", "train.schedule.total_steps=30",
];

fn with_fast<'a>(base: &[&'a str]) -> Vec<&'a str> {
    let mut v = base.to_vec();
    v.extend_from_slice(&FAST);
    v
}

#[test]
fn training_logs_and_reports() {
    let d = tempfile::tempdir().unwrap();
    synth_small(d.path(), "data");
    ok(&with_fast(&["train", "--config", "data/run.toml", "--stage", "linker"]), d.path());
    let again = ok(&with_fast(&["train", "--config", "data/run.toml", "--stage", "linker"]), d.path());
    assert!(again.contains("already complete"), "{again}");
    ok(&with_fast(&["train", "--config", "data/run.toml", "--stage", "full"]), d.path());
    for (log, n) in [("linker-facts.jsonl", 20), ("multitask.jsonl", 30)] {
        let text = fs::read_to_string(d.path().join("data/run/logs").join(log)).unwrap();
        let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), n);
        let steps: Vec<u64> = lines.iter().map(|l| l["step"].as_u64().unwrap()).collect();
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
        assert!(lines.iter().all(|l| l["lr"].is_object() && l["loss"]["total"].is_number() && l["seed"] == 13));
    }

    let mrr = ok(&with_fast(&["eval", "--config", "data/run.toml", "--probe", "mrr"]), d.path());
    let report: Value = serde_json::from_str(&fs::read_to_string(d.path().join("data/run/reports/mrr.json")).unwrap()).unwrap();
    let probes = fs::read_to_string(d.path().join("data/probes.jsonl")).unwrap();
    for line in probes.lines() {
        let rel = serde_json::from_str::<Value>(line).unwrap()["relation"].as_str().unwrap().to_string();
        assert!(report["per_relation"].get(&rel).is_some(), "missing {rel}");
        assert!(mrr.contains(&format!("mrr/{rel}")));
    }
    assert_eq!(report["seed"], 13);
    assert!(report["config_hash"].as_str().is_some_and(|h| !h.is_empty()));
    assert!(d.path().join("data/run/reports/mrr.txt").exists());

    ok(&with_fast(&["eval", "--config", "data/run.toml", "--probe", "ppl"]), d.path());
    let ppl: Value = serde_json::from_str(&fs::read_to_string(d.path().join("data/run/reports/ppl.json")).unwrap()).unwrap();
    assert!(ppl["value"].as_f64().unwrap() > 1.0);

    // a different encoder shape cannot resume from this checkpoint
    let done = ok(&with_fast(&["train", "--config", "data/run.toml", "--stage", "full"]), d.path());
    assert!(done.contains("already complete"), "{done}");
    let mismatch = kblm(&with_fast(&["train", "--config", "data/run.toml", "--stage", "full", "--set", "encoder.heads=2"]), d.path());
    assert_eq!(mismatch.status.code(), Some(1));
}

#[test]
fn el_report_fields_are_consistent() {
    let d = tempfile::tempdir().unwrap();
    ok(&["synth", "--out", "data", "--benchmark", "senses", "--set", "train=60", "--set", "test=20"], d.path());
    let fast = [
        "--set", "encoder.layers=2",
        "--set", "encoder.dim=16",
        "--set", "encoder.ffn=32",
        "--set", "kb.0.kar.layer=1",
        "--set", "linker.schedule.total_steps=20",
    ];
    let mut args = vec!["train", "--config", "data/run.toml", "--stage", "linker"];
    args.extend_from_slice(&fast);
    ok(&args, d.path());
    for probe in ["el", "wsd"] {
        let mut args = vec!["eval", "--config", "data/run.toml", "--probe", probe];
        args.extend_from_slice(&fast);
        ok(&args, d.path());
    }
    let el: Value = serde_json::from_str(&fs::read_to_string(d.path().join("data/run/reports/el.json")).unwrap()).unwrap();
    let p = el["details"]["precision"].as_f64().unwrap();
    let r = el["details"]["recall"].as_f64().unwrap();
    let f = el["value"].as_f64().unwrap();
    let expect = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    assert!((f - expect).abs() < 1e-12);
    let wsd: Value = serde_json::from_str(&fs::read_to_string(d.path().join("data/run/reports/wsd.json")).unwrap()).unwrap();
    let lines = fs::read_to_string(d.path().join("data/wsd.jsonl")).unwrap().lines().count() as f64;
    assert_eq!(wsd["details"]["evaluated"].as_f64().unwrap() + wsd["details"]["invalid"].as_f64().unwrap(), lines);
}

/// Hand-built KB with overlapping mentions `new york` and `york`, and no
/// supervision.
fn overlap_workspace(dir: &Path) {
    let vocab = Vocabulary::with_reserved(["i", "like", "new", "york", "and", "cats", "."]).unwrap();
    vocab.save(dir.join("vocab.txt")).unwrap();
    let mut dict = CandidateDictionary::new();
    let c = |entity, prior| Candidate { entity, prior };
    dict.insert("new york", vec![c(0, 0.8), c(1, 0.2)], 3).unwrap();
    dict.insert("york", vec![c(2, 0.9)], 3).unwrap();
    let mut emb = Tensor::zeros(3, 4);
    for (i, v) in emb.data_mut().iter_mut().enumerate() {
        *v = ((i * 7) % 5) as f64 / 5.0 - 0.4;
    }
    let kb = KnowledgeBase::new("places", vec!["NYC".into(), "NY_state".into(), "York_UK".into()], emb, dict).unwrap();
    fs::create_dir_all(dir.join("kb")).unwrap();
    kb.save(&KbPaths { lemmas: None, ..KbPaths::in_dir(dir.join("kb")) }).unwrap();
    fs::write(dir.join("corpus.jsonl"), "{\"sent_a\":\"i like new york\",\"sent_b\":\"i like cats .\",\"is_next\":true}\n").unwrap();
    fs::write(
        dir.join("run.toml"),
        r#"seed = 3
vocab = "vocab.txt"
corpus = "corpus.jsonl"

[encoder]
layers = 2
dim = 16
heads = 2
ffn = 32
max_len = 16

[[kb]]
name = "places"
dir = "kb"

[kb.kar]
layer = 1
entity_dim = 4
heads = 1
ffn = 8
score_hidden = 6

[train.schedule]
total_steps = 5
batch_size = 2
"#,
    )
    .unwrap();
}

#[test]
fn linker_without_supervision_is_skipped_and_link_shows_overlaps() {
    let d = tempfile::tempdir().unwrap();
    overlap_workspace(d.path());
    let out = ok(&["train", "--config", "run.toml", "--stage", "linker"], d.path());
    assert!(out.contains("skipped: no entity-linking supervision"), "{out}");
    ok(&["train", "--config", "run.toml", "--stage", "full"], d.path());

    let none = ok(&["link", "--config", "run.toml", "--sentence", "i like cats ."], d.path());
    assert!(none.contains("no candidate mentions"));

    let text = ok(&["link", "--config", "run.toml", "--sentence", "i like new york", "--top-k", "2"], d.path());
    assert!(text.contains("\"new york\"") && text.contains("\"york\""), "{text}");
    let json: Value = serde_json::from_str(&ok(&["link", "--config", "run.toml", "--sentence", "i like new york", "--json"], d.path())).unwrap();
    let spans = json.as_array().unwrap();
    assert_eq!(spans.len(), 2);
    assert_eq!((spans[0]["start"].as_u64(), spans[0]["end"].as_u64()), (Some(2), Some(3)));
    assert_eq!((spans[1]["start"].as_u64(), spans[1]["end"].as_u64()), (Some(3), Some(3)));
    for s in spans {
        let weights: Vec<f64> = s["candidates"].as_array().unwrap().iter().map(|c| c["psi_tilde"].as_f64().unwrap()).collect();
        let sum: f64 = weights.iter().sum();
        if sum == 0.0 {
            assert!(s["chosen"].is_null());
        } else {
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn trace_reproduces_the_bundled_reference() {
    let d = tempfile::tempdir().unwrap();
    let o = kblm(&["trace", "--out", "trace.json"], d.path());
    assert!(o.status.success());
    let stderr = String::from_utf8_lossy(&o.stderr);
    for line in stderr.lines().filter(|l| l.contains("max |computed - reference|")) {
        let v: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
        assert!(v < 1e-9, "{line}");
    }
    let doc: Value = serde_json::from_str(&fs::read_to_string(d.path().join("trace.json")).unwrap()).unwrap();
    for key in ["h_proj", "s", "s_e", "psi", "psi_tilde", "e_tilde", "s_prime_e", "h_prime"] {
        assert!(doc["trace"].get(key).is_some() || doc["trace"].as_object().unwrap().keys().any(|k| k.eq_ignore_ascii_case(key)), "{key}");
    }
}
