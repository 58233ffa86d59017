use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ordiff::trainer::parse_metrics_csv;
use ordiff::viz::parse_dump;

fn ordiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ordiff")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ordiff(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).expect("utf-8")
}

fn write_config(dir: &Path, dataset: &str, ordering: &str) -> String {
    let cfg = format!(
        r#"{{
  "name": "t",
  "dataset": {dataset},
  "ordering": {ordering},
  "diffusion_steps": 4,
  "model": {{ "layers": 1, "model_dim": 16, "heads": 2, "ff_dim": 32 }},
  "optimizer": {{ "lr": 0.003, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8 }},
  "batch_size": 8,
  "train_steps": 6,
  "eval_every": 3,
  "eval": {{ "sequences": 8, "method": {{ "kind": "full", "mode": {{ "kind": "exact", "max_uncertain": 16 }} }} }},
  "seed": 5,
  "output_dir": "run"
}}"#
    );
    let path = dir.join("config.json");
    fs::write(&path, cfg).unwrap();
    path.to_str().unwrap().to_string()
}

fn toy_config(dir: &Path) -> String {
    write_config(
        dir,
        r#"{ "kind": "toy", "sequences": 300, "seq_len": 7, "seed": 1 }"#,
        r#"{ "strategy": "groups", "destroy_groups": [["c", "d", "e", "f"], ["a", "b"]] }"#,
    )
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(ordiff(&["--help"]).status.code(), Some(0));
    assert_eq!(ordiff(&["train", "--help"]).status.code(), Some(0));
    assert_eq!(ordiff(&["--no-such-flag"]).status.code(), Some(2));
    assert_eq!(ordiff(&["train"]).status.code(), Some(2));
    let out = ordiff(&["train", "--config", "/does/not/exist.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn toy_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let run = dir.path().join("run");
    let run = run.to_str().unwrap();

    let order = ok(&["order", "--config", &cfg]);
    assert!(order.contains("0\t\"c\" \"d\" \"e\" \"f\""), "{order}");
    let sched = ok(&["schedule", "--config", &cfg]);
    assert!(sched.starts_with("T=4 V=6 groups=2 violations=0"), "{sched}");

    let trained = ok(&["--quiet", "train", "--config", &cfg]);
    assert!(trained.contains("bits/token"));
    for f in ["model.ckpt", "metrics.ndjson", "schedule.bin", "order.txt", "vocab.tsv", "config.json"] {
        assert!(dir.path().join("run").join(f).is_file(), "{f}");
    }

    let report: serde_json::Value = serde_json::from_str(&ok(&["eval", "--run", run, "--split", "test"])).unwrap();
    let bits = report["bits_per_token"].as_f64().unwrap();
    assert!((report["perplexity"].as_f64().unwrap() - bits.exp2()).abs() < 1e-9);

    let a = ok(&["--seed", "9", "sample", "--run", run, "--count", "3"]);
    assert_eq!(a, ok(&["--seed", "9", "sample", "--run", run, "--count", "3"]));
    assert_eq!(a.lines().count(), 3);
    assert!(a.lines().all(|l| l.len() == 7 && !l.contains('?')));

    let dump = ok(&["viz-reverse", "--run", run, "--snapshots", "3"]);
    let lines = parse_dump(&dump).unwrap();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], (4, "???????".into()));
    assert_eq!(lines[2].0, 0);
    assert!(!lines[2].1.contains('?'));

    let fwd = parse_dump(&ok(&["viz-forward", "--config", &cfg, "--snapshots", "5"])).unwrap();
    assert_eq!(fwd.iter().map(|l| l.0).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    assert!(!fwd[0].1.contains('?'));
    assert_eq!(fwd[4].1, "???????");

    let csv = dir.path().join("m.csv");
    ok(&["export-csv", run, "--out", csv.to_str().unwrap()]);
    let rows = parse_metrics_csv(fs::File::open(&csv).unwrap()).unwrap();
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 3, 6]);
    assert!(rows.iter().all(|r| r.strategy == "groups" && r.repeat == 0));
}

#[test]
fn compare_writes_ranked_table_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let csv = dir.path().join("cmp.csv");
    let table = ok(&[
        "--quiet", "compare", "--config", &cfg, "--strategies", "standard,common-first", "--repeats", "2", "--steps", "3",
        "--csv", csv.to_str().unwrap(),
    ]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "rank\tstrategy\tmean_bits\tstd_bits\trepeats");
    assert_eq!(lines.len(), 3);
    let rows = parse_metrics_csv(fs::File::open(&csv).unwrap()).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 2);
    assert!(rows.iter().any(|r| r.strategy == "common-first" && r.repeat == 1));
    assert!(dir.path().join("run/standard/1/model.ckpt").is_file());
}

#[test]
fn prepare_char_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let text: String = "the cat sat on the mat and then the dog ran off ".repeat(40);
    let input = dir.path().join("text.txt");
    fs::write(&input, format!("{text}\n")).unwrap();
    let data = dir.path().join("data");
    ok(&["--quiet", "prepare", "--kind", "char", "--input", input.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    let vocab = fs::read_to_string(data.join("vocab.tsv")).unwrap();
    assert_eq!(vocab.lines().count(), 14, "{vocab}");

    let cfg = write_config(
        dir.path(),
        r#"{ "kind": "prepared", "dir": "data", "seq_len": 24 }"#,
        r#"{ "strategy": "rare-first" }"#,
    );
    // space is the most frequent character: generated first, so destroyed last
    let order = ok(&["order", "--config", &cfg, "--strategy", "common-first"]);
    assert_eq!(order.lines().last().unwrap(), "13\t\" \"", "{order}");
    let order = ok(&["order", "--config", &cfg]);
    assert_eq!(order.lines().nth(1).unwrap(), "0\t\" \"", "{order}");
    let fwd = parse_dump(&ok(&["--seed", "1", "viz-forward", "--config", &cfg, "--snapshots", "3"])).unwrap();
    assert_eq!(fwd.len(), 3);
    assert_eq!(fwd[2].1, "?".repeat(24));

    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "Upper Case").unwrap();
    let out = ordiff(&["prepare", "--kind", "char", "--input", bad.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
