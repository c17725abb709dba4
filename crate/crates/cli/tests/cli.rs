use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ftf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ftf"))
        .args(args)
        .output()
        .expect("spawn ftf")
}

fn json_reports(dir: &Path) -> Vec<PathBuf> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    found.sort();
    found
}

#[test]
fn help_exits_zero_and_lists_symbols() {
    let out = ftf(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in ["retrieve", "--lambda", "--tau", "--m-neighbors", "λ"] {
        assert!(text.contains(needle), "help lacks {needle}");
    }
}

#[test]
fn retrieve_without_gallery_is_a_usage_error() {
    let out = ftf(&["retrieve"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn unknown_subcommand_and_bad_ranges_exit_two() {
    assert_eq!(ftf(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(ftf(&["--lambda", "2", "eval"]).status.code(), Some(2));
    assert_eq!(ftf(&["--tau", "0", "eval"]).status.code(), Some(2));
    assert_eq!(ftf(&["--k", "0", "eval"]).status.code(), Some(2));
}

#[test]
fn missing_input_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("nope.ftfg");
    let q = dir.path().join("nope.ftfq");
    let out = ftf(&["--gallery", g.to_str().unwrap(), "--queries", q.to_str().unwrap(), "retrieve"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_reports_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("reports");
    let run = || {
        let out = ftf(&[
            "--k", "100", "--seed", "7", "--out", out_dir.to_str().unwrap(), "eval", "--epochs", "4",
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let reports = json_reports(&out_dir);
        assert_eq!(reports.len(), 1);
        fs::read(&reports[0]).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["options"]["k"], 100);
    assert_eq!(v["options"]["lambda"], 0.5);
    assert!(v["report"]["mr"].is_number());
}

#[test]
fn gen_index_retrieve_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let common = ["--seed", "3", "--out", out];

    let gen = ftf(&[&common[..], &["gen"]].concat());
    assert_eq!(gen.status.code(), Some(0));
    let data = dir.path().join("dataset-seed3.ftfd");
    assert!(data.exists());

    let idx = ftf(&[&common[..], &["index", "--data", data.to_str().unwrap(), "--epochs", "2"]].concat());
    assert_eq!(idx.status.code(), Some(0), "{}", String::from_utf8_lossy(&idx.stderr));
    let g = dir.path().join("gallery-seed3.ftfg");
    let q = dir.path().join("queries-seed3.ftfq");

    let ret = ftf(&[
        "--gallery", g.to_str().unwrap(),
        "--queries", q.to_str().unwrap(),
        "--k", "5",
        "retrieve", "--top", "3",
    ]);
    assert_eq!(ret.status.code(), Some(0), "{}", String::from_utf8_lossy(&ret.stderr));
    let text = String::from_utf8_lossy(&ret.stdout);
    assert!(text.contains("img-"));
    // header, column titles, three rows
    assert_eq!(text.lines().count(), 5);

    let bad = ftf(&[
        "--gallery", g.to_str().unwrap(),
        "--queries", q.to_str().unwrap(),
        "retrieve", "--query-id", "no-such-query",
    ]);
    assert_eq!(bad.status.code(), Some(1));
}
