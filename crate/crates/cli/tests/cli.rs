use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "[train]\ndim = 16\nhidden = 16\nbatch = 32\nn_neg = 8\nsteps = 12\ncheckpoint_every = 6\n";

fn ngdbzoo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ngdbzoo"))
        .args(args)
        .current_dir(dir)
        .env_remove("NGDBZOO_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stderr_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    assert_eq!(text.trim().lines().count(), 1, "one-line error expected: {text}");
    serde_json::from_str(text.trim()).expect("machine-parsable error")
}

fn setup() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("c.toml"), SMALL).unwrap();
    d
}

#[test]
fn unknown_subcommand_is_one_line() {
    let d = setup();
    let o = ngdbzoo(d.path(), &["frobnicate"]);
    assert!(!o.status.success());
    assert_eq!(stderr_json(&o)["error"], "unknown_subcommand");
}

#[test]
fn bad_config_field_named() {
    let d = setup();
    std::fs::write(d.path().join("bad.toml"), "[train]\nbatch = 0\n").unwrap();
    let o = ngdbzoo(d.path(), &["--config", "bad.toml", "train"]);
    assert!(!o.status.success());
    let e = stderr_json(&o);
    assert_eq!((e["error"].as_str(), e["field"].as_str()), (Some("config"), Some("batch")));
}

#[test]
fn help_lists_flags() {
    let d = setup();
    let cases: [(&str, &[&str]); 6] = [
        ("train", &["--config", "--seed", "--backbone", "--steps", "--out", "--patterns"]),
        ("eval", &["--checkpoint", "--queries", "--out"]),
        ("bench", &["--mixture", "--steps", "--out"]),
        ("sample", &["--seed", "--patterns", "--count", "--out"]),
        ("import-embeddings", &["--in", "--dim", "--out"]),
        ("gradcheck", &["--instances"]),
    ];
    for (cmd, flags) in cases {
        let o = ngdbzoo(d.path(), &[cmd, "--help"]);
        assert!(o.status.success());
        let text = String::from_utf8_lossy(&o.stdout);
        for f in flags.iter().chain(&["--threads", "--precision", "--trace"]) {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn train_then_eval_carries_hash() {
    let d = setup();
    let o = ngdbzoo(d.path(), &["--config", "c.toml", "--threads", "1", "--seed", "7", "train", "--backbone", "gqe", "--out", "run", "--trace", "t.json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let hash = summary["config_hash"].as_str().unwrap().to_string();
    for f in ["run/last.ngck", "run/ckpt-000006.ngck", "run/ckpt-000012.ngck", "run/config.toml", "t.json"] {
        assert!(d.path().join(f).is_file(), "{f}");
    }
    let log = std::fs::read_to_string(d.path().join("run/metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 12);
    for l in log.lines() {
        let m: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(m["config_hash"], hash.as_str());
    }

    let o = ngdbzoo(d.path(), &["eval", "--checkpoint", "run/last.ngck", "--out", "r.json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(r["config_hash"], hash.as_str());
    assert!(r["all"]["mrr"].as_f64().unwrap() > 0.0);

    let o = ngdbzoo(d.path(), &["--precision", "f64", "eval", "--checkpoint", "run/last.ngck"]);
    assert!(!o.status.success());
    assert_eq!(stderr_json(&o)["error"], "precision_mismatch");

    std::fs::write(d.path().join("q2b.toml"), format!("{SMALL}backbone = \"q2b\"\n")).unwrap();
    let o = ngdbzoo(d.path(), &["--config", "q2b.toml", "eval", "--checkpoint", "run/last.ngck"]);
    assert!(!o.status.success());
    assert_eq!(stderr_json(&o)["error"], "backbone_mismatch");
    let o = ngdbzoo(d.path(), &["--config", "c.toml", "eval", "--checkpoint", "run/last.ngck"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn single_threaded_runs_reproduce() {
    let d = setup();
    for out in ["a", "b"] {
        let o = ngdbzoo(d.path(), &["--config", "c.toml", "--threads", "1", "train", "--out", out]);
        assert!(o.status.success());
    }
    let read = |p: &str| std::fs::read(d.path().join(p)).unwrap();
    assert_eq!(read("a/last.ngck"), read("b/last.ngck"));
}

#[test]
fn sample_is_seeded() {
    let d = setup();
    let run = |seed: &str, out: &str| {
        let o = ngdbzoo(d.path(), &["--seed", seed, "sample", "--count", "40", "--patterns", "1p,2in,up", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(d.path().join(out)).unwrap()
    };
    let (a, b, c) = (run("3", "a.jsonl"), run("3", "b.jsonl"), run("4", "c.jsonl"));
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.lines().count(), 40);
    for l in a.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(["1p", "2in", "up"].contains(&v["pattern"].as_str().unwrap()));
        assert!(!v["answers_obs"].as_array().unwrap().is_empty());
    }
    assert!(d.path().join("a.jsonl.meta.json").is_file());
}

#[test]
fn import_embeddings_transcodes() {
    let d = setup();
    let raw: Vec<u8> = (0..12).flat_map(|i| (i as f32).to_le_bytes()).collect();
    std::fs::write(d.path().join("v.f32"), &raw).unwrap();
    let o = ngdbzoo(d.path(), &["import-embeddings", "--in", "v.f32", "--dim", "4", "--out", "s.ngse"]);
    assert!(o.status.success());
    let blob = std::fs::read(d.path().join("s.ngse")).unwrap();
    assert_eq!(&blob[..4], b"NGSE");
    assert_eq!(u32::from_le_bytes(blob[4..8].try_into().unwrap()), 1);
    assert_eq!(u64::from_le_bytes(blob[8..16].try_into().unwrap()), 3);
    assert_eq!(u32::from_le_bytes(blob[16..20].try_into().unwrap()), 4);
    assert_eq!(&blob[20..], &raw[..]);

    let o = ngdbzoo(d.path(), &["import-embeddings", "--in", "v.f32", "--dim", "5", "--out", "t.ngse"]);
    assert!(!o.status.success());
    assert_eq!(stderr_json(&o)["error"], "truncated_file");
    let o = ngdbzoo(d.path(), &["import-embeddings", "--in", "nope.f32", "--dim", "4", "--out", "t.ngse"]);
    assert_eq!(stderr_json(&o)["error"], "missing_file");
}

#[test]
fn bench_reports_positive_speedup() {
    let d = setup();
    let o = ngdbzoo(d.path(), &["--config", "c.toml", "bench", "--mixture", "uniform", "--steps", "2", "--reps", "1", "--batch", "64", "--out", "b.json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("b.json")).unwrap()).unwrap();
    assert!(r["speedup"].as_f64().unwrap() > 0.0);
    assert!(r["invocation_ratio"].as_f64().unwrap() > 1.0);
    assert!(r["config_hash"].is_string());
}

#[test]
fn gradcheck_prints_table() {
    let d = setup();
    let o = ngdbzoo(d.path(), &["gradcheck", "--instances", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("config_hash") && text.contains("pass") && !text.contains("FAIL"));
}

#[test]
fn data_dir_from_environment() {
    let d = setup();
    let o = Command::new(env!("CARGO_BIN_EXE_ngdbzoo"))
        .args(["sample", "--count", "1"])
        .current_dir(d.path())
        .env("NGDBZOO_DATA_DIR", d.path().join("missing"))
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert_eq!(stderr_json(&o)["error"], "missing_file");
}
