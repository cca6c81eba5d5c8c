use std::path::Path;
use std::process::{Command, Output};

fn flood(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flood"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_small(dir: &Path) -> (String, String) {
    let corpus = dir.join("corpus.jsonl");
    let ckpt = dir.join("model.ckpt");
    let corpus_s = corpus.to_str().unwrap().to_string();
    let ckpt_s = ckpt.to_str().unwrap().to_string();
    let o = flood(&["gen-corpus", "--preset", "standard", "--out", &corpus_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("4 atoms"), "{}", stdout(&o));
    let log = dir.join("train.jsonl");
    let o = flood(&[
        "train",
        "--corpus",
        &corpus_s,
        "--steps",
        "30",
        "--ns",
        "2",
        "--checkpoint",
        &ckpt_s,
        "--log",
        log.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = std::fs::read_to_string(&log).unwrap();
    assert_eq!(lines.lines().count(), 30);
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert!(first["loss"].as_f64().unwrap().is_finite());
    (corpus_s, ckpt_s)
}

#[test]
fn verify_reports_each_fast_criterion() {
    let o = flood(&["verify"]);
    let out = stdout(&o);
    assert!(o.status.success(), "{out}{}", stderr(&o));
    let lines: Vec<&str> = out.lines().filter(|l| l.starts_with("criterion")).collect();
    assert_eq!(lines.len(), 8, "{out}");
    assert!(lines.iter().all(|l| l.contains(" PASS ")), "{out}");
    assert!(out.contains("suite: 8/8 passed"), "{out}");
}

#[test]
fn usage_errors_exit_with_two() {
    let o = flood(&["train", "--corpus", "missing.jsonl", "--checkpoint", "x.ckpt"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("file not found"), "{}", stderr(&o));

    let dir = tempfile::tempdir().unwrap();
    let (corpus, _) = train_small(dir.path());
    let ck = dir.path().join("x.ckpt");
    let ck = ck.to_str().unwrap();
    let o = flood(&["train", "--corpus", &corpus, "--checkpoint", ck, "--config", "missing.cfg"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("missing.cfg"));

    assert_eq!(flood(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(flood(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(flood(&["train", "--corpus", &corpus, "--checkpoint", ck, "--K", "7"]).status.code(), Some(2));
    assert_eq!(flood(&["train", "--corpus", &corpus, "--checkpoint", ck, "--ns", "0"]).status.code(), Some(2));
    assert!(!Path::new(ck).exists());
}

#[test]
fn corpus_train_sample_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = train_small(dir.path());
    let samples = dir.path().join("samples.jsonl");
    let o = flood(&[
        "sample",
        "--checkpoint",
        &ckpt,
        "--steps-per-unit",
        "10",
        "--cfg",
        "6",
        "--count",
        "3",
        "--controls",
        "1",
        "--out",
        samples.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let echo: serde_json::Value = serde_json::from_str(stdout(&o).lines().next().unwrap()).unwrap();
    assert_eq!(echo["steps_per_unit"], 10);
    assert_eq!(echo["cfg_scale"], 6.0);
    assert_eq!(echo["n_s"], 2.0);
    assert_eq!(echo["K"], 10);
    assert_eq!(echo["T"], 6.0);
    assert_eq!(echo["total_solver_steps"], 60);
    let text = std::fs::read_to_string(&samples).unwrap();
    let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 3);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r["index"], i);
        assert_eq!(r["frames"].as_array().unwrap().len(), 10);
        assert_eq!(r["controls"], serde_json::json!(vec![1; 10]));
    }
    // Same seed, same bytes.
    let again = dir.path().join("again.jsonl");
    let o = flood(&["sample", "--checkpoint", &ckpt, "--steps-per-unit", "10", "--cfg", "6", "--count", "3", "--controls", "1", "--out", again.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&again).unwrap(), text.as_bytes());

    assert_eq!(flood(&["sample", "--checkpoint", &ckpt, "--controls", "2"]).status.code(), Some(2));
    assert_eq!(flood(&["sample", "--checkpoint", &ckpt, "--controls", "0,1"]).status.code(), Some(2));
    assert_eq!(flood(&["sample", "--checkpoint", &ckpt, "--steps-per-unit", "0"]).status.code(), Some(2));
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(flood(&["sample", "--checkpoint", junk.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn stream_prints_frames_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = train_small(dir.path());
    let o = flood(&["stream", "--checkpoint", &ckpt, "--frames", "12", "--switches", "0:0,5:1", "--steps-per-unit", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 12, "{out}");
    for (k, l) in lines.iter().enumerate() {
        let parts: Vec<&str> = l.split_whitespace().collect();
        assert_eq!(parts[0], "frame");
        assert_eq!(parts[1].parse::<usize>().unwrap(), k);
        assert_eq!(parts[3].parse::<usize>().unwrap(), 8 + 4 * k);
        assert_eq!(parts[5], if k < 5 { "0" } else { "1" });
    }
    assert_eq!(flood(&["stream", "--checkpoint", &ckpt, "--switches", "x"]).status.code(), Some(2));
}

#[test]
fn ablate_small_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablate.jsonl");
    let o = flood(&[
        "ablate",
        "--preset",
        "standard",
        "--steps",
        "10",
        "--ns",
        "2",
        "--masks",
        "bi,causal",
        "--schedules",
        "tri",
        "--samples-per-track",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.contains("bidirectional") && table.contains("causal"), "{table}");
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 2);
    assert_eq!(flood(&["ablate", "--masks", "sideways"]).status.code(), Some(2));
}

#[test]
fn serve_rebind_flag_is_not_implemented() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = train_small(dir.path());
    let o = flood(&["serve", "--checkpoint", &ckpt, "--rebind-active-frames", "--bind", "127.0.0.1:0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("not implemented"), "{}", stderr(&o));
}
